use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use m2xfp::dse::{synth_tensor, Dist};
use m2xfp::packing::{read_f32_tensor, write_f32_tensor};

fn m2xfp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_m2xfp")).args(args).output().expect("spawn m2xfp")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures").join(format!("{name}.m2x"))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A 3x96 heavy-tailed tensor written as F32T.
fn sample_tensor(dir: &Path) -> (PathBuf, Vec<f32>) {
    let values = synth_tensor(Dist::StudentT(3.0), &[3, 96], 11, 1.0).unwrap();
    let path = dir.join("x.f32t");
    write_f32_tensor(std::fs::File::create(&path).unwrap(), &[3, 96], &values).unwrap();
    (path, values)
}

#[test]
fn inspect_golden_fixture() {
    let out = m2xfp(&["inspect", s(&fixture("elem-em-top1"))]);
    assert_eq!(code(&out), 0);
    let want = "\
container       M2XF v1
format          elem-em-top1 (id 3)
strategy        elem-em-top1@32/8:floor
group size      32
subgroup size   8
meta bits       2
scale rule      floor
adaptive        false
dims            32
groups          1
ebw             4.5
element stream  16 bytes
scale stream    1 bytes
meta stream     1 bytes
scale histogram
  e8m0 0x7e = 2^-1      1
";
    assert_eq!(stdout(&out), want);
}

#[test]
fn inspect_nvfp4_family_fields() {
    let text = stdout(&m2xfp(&["inspect", s(&fixture("m2-nvfp4-a"))]));
    assert!(text.contains("role            activations\n"));
    assert!(text.contains("tensor scale    0.0078125\n"));
    assert!(text.contains("ebw             5\n"));
    assert!(text.contains("  e4m3 0x69 = 72        1\n"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (x, _) = sample_tensor(dir.path());
    let q = dir.path().join("x.m2x");

    assert_eq!(code(&m2xfp(&["inspect", s(&dir.path().join("missing.m2x"))])), 3);
    assert_eq!(code(&m2xfp(&["quantize", "--format", "bogus", s(&x), s(&q)])), 2);
    assert_eq!(code(&m2xfp(&["frobnicate"])), 2);
    // an F32T file is not a container
    assert_eq!(code(&m2xfp(&["inspect", s(&x)])), 4);

    assert_eq!(code(&m2xfp(&["quantize", s(&x), s(&q)])), 0);
    let bytes = std::fs::read(&q).unwrap();
    let cut = dir.path().join("cut.m2x");
    std::fs::write(&cut, &bytes[..bytes.len() - 3]).unwrap();
    assert_eq!(code(&m2xfp(&["dequantize", s(&cut), s(&dir.path().join("y.f32t"))])), 4);

    // weights must share K with the activations
    let w = dir.path().join("w.f32t");
    write_f32_tensor(std::fs::File::create(&w).unwrap(), &[64, 2], &[0.5; 128]).unwrap();
    let out = m2xfp(&["gemm", s(&x), s(&w), s(&dir.path().join("c.f32t"))]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn quantize_dequantize_matches_dse_mse() {
    let dir = tempfile::tempdir().unwrap();
    let (x, values) = sample_tensor(dir.path());
    let q = dir.path().join("x.m2x");
    let y = dir.path().join("y.f32t");
    for (flags, strategy) in [
        (vec!["--format", "mxfp4"], "mxfp4"),
        (vec!["--format", "elem-em"], "elem-em-top1"),
        (vec!["--format", "sg-em", "--meta-bits", "2", "--adaptive"], "sg-em-2b-adaptive"),
    ] {
        let mut args = vec!["quantize"];
        args.extend(&flags);
        args.extend([s(&x), s(&q)]);
        assert_eq!(code(&m2xfp(&args)), 0, "{strategy}");
        assert_eq!(code(&m2xfp(&["dequantize", s(&q), s(&y)])), 0);
        let (dims, back) = read_f32_tensor(std::fs::File::open(&y).unwrap()).unwrap();
        assert_eq!(dims, vec![3, 96]);
        let sse: f64 = back.iter().zip(&values).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum();
        let mse = sse / values.len() as f64;

        let csv = stdout(&m2xfp(&["dse", "--strategies", strategy, s(&x)]));
        let row = csv.lines().nth(1).unwrap();
        let reported: f64 = row.rsplit(',').next().unwrap().parse().unwrap();
        assert!((mse - reported).abs() <= 1e-12 * reported, "{strategy}: {mse} vs {reported}");
    }
}

#[test]
fn thread_count_does_not_change_output() {
    let dir = tempfile::tempdir().unwrap();
    let (x, _) = sample_tensor(dir.path());
    let mut containers = Vec::new();
    let mut csvs = Vec::new();
    for threads in ["1", "3"] {
        let q = dir.path().join(format!("q{threads}.m2x"));
        let out = m2xfp(&["--threads", threads, "quantize", "--format", "sg-em", "--adaptive", s(&x), s(&q)]);
        assert_eq!(code(&out), 0);
        containers.push(std::fs::read(&q).unwrap());
        csvs.push(stdout(&m2xfp(&["--threads", threads, "dse", "--synth", "laplace:64x64:5", s(&x)])));
    }
    assert_eq!(containers[0], containers[1]);
    assert_eq!(csvs[0], csvs[1]);
}

#[test]
fn dse_is_deterministic_and_pareto_is_a_subset() {
    let args = ["dse", "--synth", "student_t(3):128x128:9", "--synth", "gaussian:64x64:1", "--assert-dominance"];
    let a = m2xfp(&args);
    assert_eq!(code(&a), 0, "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(stdout(&a), stdout(&m2xfp(&args)));
    let full = stdout(&a);
    let header = full.lines().next().unwrap();
    assert_eq!(header, "tensor,strategy,k,subgroup,meta_bits,adaptive,scale_rule,ebw,mse");

    let mut pareto_args = args.to_vec();
    pareto_args.push("--pareto");
    let front = stdout(&m2xfp(&pareto_args));
    assert_eq!(front.lines().next().unwrap(), header);
    let rows: Vec<&str> = front.lines().skip(1).collect();
    assert!(!rows.is_empty() && rows.len() < full.lines().count() - 1);
    for row in &rows {
        assert!(full.lines().any(|l| l == *row), "{row}");
    }
    // within a tensor the front has strictly falling mse as ebw rises
    for tensor in ["student_t(3):128x128:9", "gaussian:64x64:1"] {
        let pts: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| r.starts_with(&format!("{tensor},")))
            .map(|r| {
                let f: Vec<&str> = r.split(',').collect();
                (f[7].parse().unwrap(), f[8].parse().unwrap())
            })
            .collect();
        assert!(pts.windows(2).all(|w| w[0].0 <= w[1].0 && w[0].1 >= w[1].1), "{tensor}: {pts:?}");
    }
}

#[test]
fn gemm_engine_matches_oracle_path() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth_tensor(Dist::Gaussian, &[4, 64], 1, 1.0).unwrap();
    let b = synth_tensor(Dist::Laplace, &[64, 3], 2, 1.0).unwrap();
    let (pa, pb) = (dir.path().join("a.f32t"), dir.path().join("b.f32t"));
    write_f32_tensor(std::fs::File::create(&pa).unwrap(), &[4, 64], &a).unwrap();
    write_f32_tensor(std::fs::File::create(&pb).unwrap(), &[64, 3], &b).unwrap();
    let (ce, co) = (dir.path().join("ce.f32t"), dir.path().join("co.f32t"));
    assert_eq!(code(&m2xfp(&["gemm", s(&pa), s(&pb), s(&ce)])), 0);
    assert_eq!(code(&m2xfp(&["gemm", "--oracle", s(&pa), s(&pb), s(&co)])), 0);
    let (de, ve) = read_f32_tensor(std::fs::File::open(&ce).unwrap()).unwrap();
    let (dor, vo) = read_f32_tensor(std::fs::File::open(&co).unwrap()).unwrap();
    assert_eq!(de, vec![4, 3]);
    assert_eq!(de, dor);
    for (e, o) in ve.iter().zip(&vo) {
        assert!((e - o).abs() <= 1e-6 * o.abs().max(1.0), "{e} vs {o}");
    }
}

#[test]
fn quick_selfcheck_passes() {
    let out = m2xfp(&["selfcheck", "--quick"]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    assert!(stdout(&out).lines().count() >= 8);
}
