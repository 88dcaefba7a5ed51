use std::path::Path;
use std::process::{Command, Output};

use crossformer_cli::checkpoint::Checkpoint;
use crossformer_cli::commands::param_group;

fn crossformer(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crossformer"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

#[test]
fn variants_listing() {
    let dir = tempfile::tempdir().unwrap();
    let o = crossformer(&["variants"], dir.path());
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    let headers: Vec<&str> = text.lines().filter(|l| !l.starts_with(' ') && !l.is_empty()).collect();
    assert_eq!(headers.len(), 8, "{text}");
    let block = |name: &str| -> Vec<String> {
        let start = text.lines().position(|l| l.starts_with(&format!("{name} "))).unwrap();
        text.lines().skip(start + 2).take(4).map(|l| l.split_whitespace().collect::<Vec<_>>().join(" ")).collect()
    };
    let s = block("S");
    let gi: Vec<String> = s.iter().map(|l| l.split(' ').skip(6).take(2).collect::<Vec<_>>().join("/")).collect();
    assert_eq!(gi, ["7/8", "7/4", "7/2", "7/1"]);
    let dense = block("S-dense");
    assert!(dense[0].starts_with("1 200x320 4,8,16,32 4 96 3 14 16 "), "{}", dense[0]);
    let toy = crossformer(&["variants", "--include-toy"], dir.path());
    assert!(stdout(&toy).lines().any(|l| l.starts_with("toy ")));
}

#[test]
fn count_against_references() {
    let dir = tempfile::tempdir().unwrap();
    let o = crossformer(&["count", "--variant", "S"], dir.path());
    assert_eq!(code(&o), 0);
    let t = stdout(&o);
    assert!(t.contains("PASS  S "), "{t}");
    assert!(!t.contains("FAIL"));

    let ape = stdout(&crossformer(&["count", "--variant", "S", "--bias", "ape"], dir.path()));
    assert!(ape.contains("PASS  S/APE") && ape.contains("params 30.93M"), "{ape}");

    let single = stdout(&crossformer(&["count", "--variant", "S", "--cel", "single"], dir.path()));
    assert!(single.contains("PASS  S/CEL single"), "{single}");

    let csv = stdout(&crossformer(&["count", "--variant", "T", "--csv"], dir.path()));
    let total = csv.lines().find(|l| l.starts_with("total,")).unwrap();
    let macs: u64 = total.rsplit(',').next().unwrap().parse().unwrap();
    let sum: u64 = csv
        .lines()
        .skip(1)
        .take_while(|l| !l.starts_with("total"))
        .map(|l| l.rsplit(',').next().unwrap().parse::<u64>().unwrap())
        .sum();
    assert_eq!(macs, sum);

    // dense grouping at a detection-sized input has no reference row
    let o = crossformer(&["count", "--variant", "S-dense"], dir.path());
    assert_eq!(code(&o), 0);
    assert!(!stdout(&o).contains("PASS"));
}

#[test]
fn usage_and_config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert_eq!(code(&crossformer(&["count", "--variant", "XL"], p)), 2);
    assert_eq!(code(&crossformer(&["count", "--attn", "global"], p)), 2);
    assert_eq!(code(&crossformer(&["frobnicate"], p)), 2);
    std::fs::write(p.join("bad.cfg"), "variant = S\nheads = 3\n").unwrap();
    let o = crossformer(&["count", "--config", "bad.cfg"], p);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));
    assert_eq!(code(&crossformer(&["count", "--variant", "S", "--size", "225", "224"], p)), 2);
    assert_eq!(code(&crossformer(&["gradcheck", "--variant", "T"], p)), 2);
    assert_eq!(code(&crossformer(&["forward", "--checkpoint", "missing.xfmr"], p)), 2);
}

#[test]
fn bench_scaling_table() {
    let dir = tempfile::tempdir().unwrap();
    let o = crossformer(&["bench", "--sizes", "14", "28", "--dim", "8", "--repeats", "1"], dir.path());
    assert_eq!(code(&o), 0);
    let t = stdout(&o);
    assert!(t.contains("x4.00") && t.contains("x16.00") && t.contains("PASS"), "{t}");
    let same = stdout(&crossformer(&["bench", "--sizes", "7", "--group", "7", "--dim", "8"], dir.path()));
    let row: Vec<&str> = same.lines().nth(2).unwrap().split_whitespace().collect();
    assert_eq!(row[2], row[4]);
}

#[test]
fn corrupted_backward_fails_gradcheck() {
    let dir = tempfile::tempdir().unwrap();
    let o = crossformer(
        &["gradcheck", "--corrupt-backward", "matmul", "--max-per-input", "1", "--samples", "1"],
        dir.path(),
    );
    assert_eq!(code(&o), 1);
    let t = stdout(&o);
    assert!(t.contains("FAIL"));
    for g in ["head", "stage0.cel", "stage0.block0.attn", "stage0.block0.dpb", "stage3.block0.mlp"] {
        assert!(t.lines().any(|l| l.starts_with(&format!("{g} "))), "no row for {g}\n{t}");
    }
}

#[test]
fn groups_of_parameter_names() {
    assert_eq!(param_group("stage2.block1.attn.dpb.fc1.weight"), "stage2.block1.dpb");
    assert_eq!(param_group("stage2.block1.attn.rpb_table"), "stage2.block1.attn");
    assert_eq!(param_group("stage2.block1.norm1.gamma"), "stage2.block1.attn");
    assert_eq!(param_group("stage2.block1.norm2.beta"), "stage2.block1.mlp");
    assert_eq!(param_group("stage0.embed_norm.gamma"), "stage0.cel");
    assert_eq!(param_group("stage1.merge_norm.gamma"), "stage1.cel");
    assert_eq!(param_group("final_norm.beta"), "head");
    assert_eq!(param_group("ape"), "ape");
}

#[test]
fn train_bake_and_reload() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let o = crossformer(&["train-toy", "--steps", "40", "--stop-at-full-accuracy", "--out", "run.xfmr"], p);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let t = stdout(&o);
    assert!(t.contains("reached 100% training accuracy"), "{t}");
    let again = stdout(&crossformer(&["train-toy", "--steps", "40", "--stop-at-full-accuracy", "--out", "b.xfmr"], p));
    assert_eq!(t.replace("b.xfmr", "run.xfmr").replace("b.cfg", "run.cfg"), again.replace("b.xfmr", "run.xfmr").replace("b.cfg", "run.cfg"));
    assert_eq!(std::fs::read(p.join("run.xfmr")).unwrap(), std::fs::read(p.join("b.xfmr")).unwrap());

    let o = crossformer(&["forward", "--checkpoint", "run.xfmr", "--batch", "2"], p);
    assert_eq!(code(&o), 0);
    let f = stdout(&o);
    let macs = f.lines().find(|l| l.starts_with("MACs executed")).unwrap();
    let nums: Vec<&str> = macs.split_whitespace().filter(|w| w.trim_end_matches(')').parse::<u64>().is_ok()).collect();
    assert_eq!(nums[0], nums[1].trim_end_matches(')'));

    let o = crossformer(&["bake-dpb", "run.xfmr", "--out", "baked.xfmr"], p);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).contains("PASS: live DPB vs baked RPB"));
    let baked = Checkpoint::load(p.join("baked.xfmr")).unwrap();
    assert!(baked.iter().any(|(n, _)| n.ends_with("attn.rpb_table")));
    assert!(!baked.iter().any(|(n, _)| n.contains(".dpb.")));

    // the baked tables stop at the trained group extent
    let o = crossformer(&["forward", "--checkpoint", "baked.xfmr", "--size", "128", "128"], p);
    assert_eq!(code(&o), 2, "{}", stdout(&o));
    assert!(String::from_utf8_lossy(&o.stderr).contains("outside the RPB table range"));
    let o = crossformer(&["forward", "--checkpoint", "run.xfmr", "--size", "128", "128"], p);
    assert_eq!(code(&o), 0);

    let o = crossformer(&["bake-dpb", "baked.xfmr", "--out", "twice.xfmr"], p);
    assert_eq!(code(&o), 2);
}
