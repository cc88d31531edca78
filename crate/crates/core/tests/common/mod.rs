#![allow(dead_code)]

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const DICTIONARY: &str = "raw_label,intensity,source,reason
7030 sleeping,Sleep,2011,
7021 sitting quietly general,SB,2011,
9060 sitting reading book,SB,2011,
11580 office work computer,SB,2011,
5060 shopping miscellaneous,LIPA,2011,
17150 walking household,LIPA,2011,
17150 walking household.,LIPA,2011,
5035 kitchen activity general,LIPA,2011,
12150 running general,MVPA,2011,
1015 bicycling general,MVPA,2011,
";

const LABELS: [&str; 12] = [
    "7021 sitting quietly general",
    "9060 sitting reading book",
    "11580 office work computer",
    "11580 office work computer",
    "5060 shopping miscellaneous",
    "17150 walking household",
    "17150 walking household.",
    "5035 kitchen activity general",
    "12150 running general",
    "1015 bicycling general",
    "7030 sleeping",
    "uncodeable;0002 image dark/blurred/obscured",
];

pub const PROMPTS: &str = r#"[
  {"id": "p-scene", "text": "Say what the wearer is doing.", "source": "curated"},
  {"id": "p-effort", "text": "How hard is the wearer working?", "source": "llm-suggested"}
]"#;

pub struct Study {
    pub root: PathBuf,
}

impl Study {
    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }
}

/// A synthetic study: annotations.csv, participants.csv, dictionary.csv,
/// prompts.json and PNG frames under images/. Runs of 1-4 frames share a
/// label, frames are 30 s apart.
pub fn write_study(root: &Path, n_participants: usize, frames_each: usize, seed: u64) -> Study {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    fs::create_dir_all(root.join("images")).unwrap();
    let mut ann = String::from("participant_id,timestamp,raw_label,image_ref\n");
    let mut people = String::from("id,age,sex\n");
    for p in 0..n_participants {
        let pid = format!("P{p:03}");
        writeln!(people, "{pid},{},{}", 20 + rng.random_range(0..50), if p % 2 == 0 { "F" } else { "M" }).unwrap();
        fs::create_dir_all(root.join("images").join(&pid)).unwrap();
        let start = 1_600_000_000i64 + p as i64 * 86_400;
        let mut label = LABELS[0];
        let mut left = 0;
        for f in 0..frames_each {
            if left == 0 {
                label = LABELS[rng.random_range(0..LABELS.len())];
                left = rng.random_range(1..=4);
            }
            left -= 1;
            let ts = chrono::DateTime::from_timestamp(start + 30 * f as i64, 0).unwrap();
            let rel = format!("{pid}/{f:05}.png");
            let shade: u8 = rng.random();
            let img = image::RgbImage::from_fn(6, 6, |x, y| image::Rgb([shade, (x * 40) as u8, (y * 40) as u8]));
            img.save(root.join("images").join(&rel)).unwrap();
            let quoted = if label.contains(',') { format!("\"{label}\"") } else { label.to_string() };
            writeln!(ann, "{pid},{},{quoted},{rel}", ts.format("%Y-%m-%dT%H:%M:%SZ")).unwrap();
        }
    }
    fs::write(root.join("annotations.csv"), ann).unwrap();
    fs::write(root.join("participants.csv"), people).unwrap();
    fs::write(root.join("dictionary.csv"), DICTIONARY).unwrap();
    fs::write(root.join("prompts.json"), PROMPTS).unwrap();
    Study { root: root.to_path_buf() }
}

pub fn camannot(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_camannot"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn camannot")
}

pub fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = camannot(dir, args);
    assert!(
        out.status.success(),
        "camannot {args:?} exited {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Every file under `dir` with its bytes, sorted by relative path.
pub fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// The full stub pipeline from raw CSVs to a sweep and plot exports,
/// writing everything under `study.root/out`.
pub fn run_pipeline(study: &Study) {
    let d = &study.root;
    ok(d, &[
        "ingest", "--annotations", "annotations.csv", "--participants", "participants.csv",
        "--dict", "dictionary.csv", "--study-id", "synthetic", "--out", "out/data", "--seed", "7",
    ]);
    ok(d, &["audit", "--data", "out/data", "--out", "out/audit", "--image-root", "images"]);
    ok(d, &[
        "dedup-labels", "--data", "out/data", "--dict", "dictionary.csv", "--threshold", "0.2",
        "--out", "out/review.txt", "--dendrogram", "out/dendrogram.json",
    ]);
    ok(d, &["apply-merges", "--review", "out/review.txt", "--dict", "dictionary.csv", "--out", "out/clean.json"]);
    ok(d, &[
        "zero-shot", "--data", "out/data", "--split", "test", "--pipeline", "dual_encoder",
        "--image-root", "images", "--out", "out/runs/dual.jsonl",
    ]);
    ok(d, &[
        "zero-shot", "--data", "out/data", "--split", "test", "--pipeline", "generative",
        "--approach", "via_clean", "--clean", "out/clean.json", "--prompts", "prompts.json",
        "--prompt", "p-scene", "--max-new-tokens", "10", "--image-root", "images", "--out", "out/runs/gen.jsonl",
    ]);
    ok(d, &["evaluate", "--truth", "out/data", "--pred", "out/runs/dual.jsonl", "--out", "out/eval/dual"]);
    ok(d, &["evaluate", "--truth", "out/data", "--pred", "out/runs/gen.jsonl", "--out", "out/eval/gen"]);
    fs::write(d.join("sweep.json"), r#"{"pipeline": "generative", "n_trials": 4, "seed": 11}"#).unwrap();
    ok(d, &[
        "sweep", "--data", "out/data", "--sweep", "sweep.json", "--out", "out/sweep", "--clean", "out/clean.json",
        "--prompts", "prompts.json", "--image-root", "images",
    ]);
    ok(d, &[
        "export-plots", "--report", "out/eval/dual/report.json", "--report", "out/eval/gen/report.json",
        "--sweep", "out/sweep", "--out", "out/plots",
    ]);
}
