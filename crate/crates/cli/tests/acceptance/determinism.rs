use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::thread::sleep;
use std::time::{Duration, Instant};

use crate::verdict::Verdict;

const STEPS: usize = 40;

fn cast() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_cast"));
    c.env("CAST_LOG_LEVEL", "warn").stdout(Stdio::null()).stderr(Stdio::null());
    c
}

fn run(args: &[&str]) -> Result<(), String> {
    let status = cast().args(args).status().map_err(|e| e.to_string())?;
    if status.success() {
        Ok(())
    } else {
        Err(format!("`cast {}` exited with {status}", args.join(" ")))
    }
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn write_config(dir: &Path, data: &Path, out: &Path) -> PathBuf {
    let path = dir.join(format!("{}.cfg", out.file_name().unwrap().to_string_lossy()));
    let text = format!(
        "seed = 11\ndata_dir = {}\nout_dir = {}\nlambda = 3\nphi = 0.2\nK = 64\nbatch = 8\nsteps = {STEPS}\n\
         input_size = 32\nchannels = 8,16,32\nembedding_dim = 16\ncheckpoint_every = 5\n",
        s(data),
        s(out)
    );
    fs::write(&path, text).unwrap();
    path
}

/// Every file under `dir` with its bytes, keyed by relative path.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// Training log without the wall-clock column.
fn log_rows(out: &Path) -> Vec<String> {
    fs::read_to_string(out.join("log.csv"))
        .unwrap()
        .lines()
        .map(|l| l.rsplit_once(',').map(|(a, _)| a.to_string()).unwrap_or_default())
        .collect()
}

fn latest_checkpoint(dir: &Path) -> Option<PathBuf> {
    let mut found: Vec<PathBuf> = fs::read_dir(dir)
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
        .collect();
    found.sort();
    found.pop()
}

/// Starts a full run and kills it once a periodic checkpoint exists but
/// before training finishes.
fn train_and_kill(config: &Path, out: &Path) -> Result<PathBuf, String> {
    let mut child: Child = cast().args(["train", "--config", s(config)]).spawn().map_err(|e| e.to_string())?;
    let ckpts = out.join("checkpoints");
    let started = Instant::now();
    loop {
        if let Some(p) = latest_checkpoint(&ckpts) {
            child.kill().map_err(|e| e.to_string())?;
            child.wait().map_err(|e| e.to_string())?;
            if out.join("final.ckpt").exists() {
                return Err("run finished before it could be killed".into());
            }
            // the kill may land after a newer checkpoint was renamed into place
            return Ok(latest_checkpoint(&ckpts).unwrap_or(p));
        }
        if let Some(status) = child.try_wait().map_err(|e| e.to_string())? {
            return Err(format!("training exited early with {status}"));
        }
        if started.elapsed() > Duration::from_secs(120) {
            let _ = child.kill();
            return Err("no checkpoint appeared within 120 s".into());
        }
        sleep(Duration::from_millis(5));
    }
}

fn check() -> Result<String, String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = tmp.path();
    let (data_a, data_b) = (root.join("data_a"), root.join("data_b"));
    for d in [&data_a, &data_b] {
        run(&["gen-data", "--count", "64", "--seed", "3", "--bias", "0.8", "--out", s(d)])?;
    }
    if snapshot(&data_a) != snapshot(&data_b) {
        return Err("gen-data output differs between identical invocations".into());
    }

    let full = root.join("full");
    let stopped = root.join("stopped");
    let killed = root.join("killed");
    let cfg_full = write_config(root, &data_a, &full);
    let cfg_stopped = write_config(root, &data_a, &stopped);
    let cfg_killed = write_config(root, &data_a, &killed);

    run(&["train", "--config", s(&cfg_full)])?;

    run(&["train", "--config", s(&cfg_stopped), "--stop-after", "17"])?;
    let mid = stopped.join("checkpoints").join("step_000017.ckpt");
    run(&["train", "--config", s(&cfg_stopped), "--resume", s(&mid)])?;

    let resumed_from = train_and_kill(&cfg_killed, &killed)?;
    run(&["train", "--config", s(&cfg_killed), "--resume", s(&resumed_from)])?;

    let final_full = fs::read(full.join("final.ckpt")).map_err(|e| e.to_string())?;
    if fs::read(stopped.join("final.ckpt")).map_err(|e| e.to_string())? != final_full {
        return Err("stop-after/resume final checkpoint differs from the uninterrupted run".into());
    }
    if fs::read(killed.join("final.ckpt")).map_err(|e| e.to_string())? != final_full {
        return Err(format!(
            "kill/resume from {} differs from the uninterrupted run",
            resumed_from.file_name().unwrap().to_string_lossy()
        ));
    }
    for step in (5..=STEPS).step_by(5) {
        let name = format!("step_{step:06}.ckpt");
        if let Ok(b) = fs::read(stopped.join("checkpoints").join(&name)) {
            if b != fs::read(full.join("checkpoints").join(&name)).map_err(|e| e.to_string())? {
                return Err(format!("periodic checkpoint {name} differs after resume"));
            }
        }
    }
    let rows = log_rows(&full);
    if rows != log_rows(&stopped) {
        return Err("resumed training log differs from the uninterrupted log".into());
    }
    if rows.len() != STEPS + 1 {
        return Err(format!("log has {} rows, expected {}", rows.len(), STEPS + 1));
    }
    let finite = rows.iter().skip(1).all(|r| {
        r.split(',').skip(1).take(3).all(|v| v.parse::<f32>().is_ok_and(f32::is_finite))
    });
    if !finite {
        return Err("non-finite loss in the training log".into());
    }

    // evaluation and visualization commands, each run twice
    let ckpt = full.join("final.ckpt");
    for rep in ["x", "y"] {
        let out = root.join(format!("eval_{rep}"));
        run(&["eval-grounding", "--config", s(&cfg_full), "--checkpoint", s(&ckpt), "--data", s(&data_a), "--out", s(&out.join("g")), "--eval-seed", "4"])?;
        run(&[
            "eval-backgrounds", "--config", s(&cfg_full), "--checkpoint", s(&ckpt), "--train-data", s(&data_a),
            "--pool", s(&data_b), "--out", s(&out.join("b")), "--probe-epochs", "20", "--seed", "2",
        ])?;
        run(&["visualize", "--config", s(&cfg_full), "--checkpoint", s(&ckpt), "--data", s(&data_a), "--out", s(&out.join("v")), "--eval-seed", "4"])?;
    }
    let (x, y) = (snapshot(&root.join("eval_x")), snapshot(&root.join("eval_y")));
    if x != y {
        let differing: Vec<String> =
            x.keys().filter(|k| x.get(*k) != y.get(*k)).map(|k| k.display().to_string()).collect();
        return Err(format!("evaluation outputs differ between runs: {}", differing.join(", ")));
    }
    Ok(format!(
        "{STEPS}-step run: final checkpoint byte-identical after --stop-after 17 + resume and after SIGKILL + resume \
         from {}; logs equal; gen-data and {} evaluation files reproducible",
        resumed_from.file_name().unwrap().to_string_lossy(),
        x.len()
    ))
}

pub fn criterion_determinism() -> Verdict {
    match check() {
        Ok(detail) => Verdict::new(true, detail),
        Err(e) => Verdict::fail(e),
    }
}
