//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[path = "../../core/tests/support/gradcheck.rs"]
mod gradcheck;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use mishape::anatomy::{
    correct_misalignment, generate_cohort, inject_misalignment, sample_surface, slice_sample, AcquisitionConfig,
    ClassLabel, CohortConfig, CohortVariant, PointCloud, Structure, SubjectSample, TruncatedEllipsoid,
    VentricleParams,
};
use mishape::clinical::{cavity_volume, InputAnatomy, InputPhases};
use mishape::harness::{
    auroc_mann_whitney, auroc_trapezoid, encode_subject, input_channels, run_cell, run_table, stratified_kfold,
    CellResult, ExperimentSpec, HarnessConfig, Method, Normalization, TableReport, Task,
};
use mishape::pointnet::{build_model, predict, train, ClassifierConfig, LabeledCloud, TNetWidths, TrainConfig};
use mishape::rng::rng_from;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

struct Outcome {
    pass: bool,
    detail: String,
}

fn line(name: &str, o: &Outcome, t: Duration) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(
        out,
        "{} {name}: {} [{:.1}s]",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail,
        t.as_secs_f64()
    );
    let _ = out.flush();
}

fn within(t: Instant, limit_s: f64) -> (bool, f64) {
    let s = t.elapsed().as_secs_f64();
    (s < limit_s, s)
}

fn gradient_suite() -> Outcome {
    let t = Instant::now();
    let reports = gradcheck::suite(20, 7177);
    let failed: Vec<String> = reports
        .iter()
        .filter(|r| !(r.passed() && r.instances >= 20))
        .map(|r| format!("{} ({:e})", r.name, r.worst))
        .collect();
    let worst = reports.iter().map(|r| r.worst).fold(0.0, f64::max);
    let (fast, s) = within(t, 60.0);
    Outcome {
        pass: failed.is_empty() && fast && !reports.is_empty(),
        detail: format!(
            "{} ops x 20 instances, worst relative error {worst:.2e} (tol 1e-4), {s:.1}s (limit 60s){}",
            reports.len(),
            if failed.is_empty() { String::new() } else { format!(", failed: {}", failed.join(", ")) }
        ),
    }
}

fn permute_rows(t: &mishape::tensor::Tensor, perm: &[usize]) -> mishape::tensor::Tensor {
    let c = t.shape()[1];
    let mut v = Vec::with_capacity(t.numel());
    for &p in perm {
        v.extend_from_slice(&t.values()[p * c..(p + 1) * c]);
    }
    mishape::tensor::Tensor::new(t.shape().to_vec(), v).unwrap()
}

fn permutation_invariance() -> Outcome {
    let t = Instant::now();
    let cfg = CohortConfig {
        points_per_structure: 128,
        ..CohortConfig::new(CohortVariant::Dual).with_counts(20, 20, 0)
    };
    let cohort = generate_cohort(&cfg, 31).unwrap();
    let (anatomy, phases) = (InputAnatomy::LvRv, InputPhases::EdEs);
    let data: Vec<LabeledCloud> = cohort
        .iter()
        .map(|s| LabeledCloud {
            points: encode_subject(s, anatomy, phases, None, Normalization::UnitSphere).unwrap(),
            label: f64::from(s.label != ClassLabel::Normal),
        })
        .collect();
    let classifier = ClassifierConfig {
        input_channels: input_channels(anatomy, phases),
        encoder_widths: vec![32, 32, 64, 128],
        head_widths: vec![64, 32, 1],
        dropout_probs: vec![0.2, 0.2],
        tnet: TNetWidths {
            encoder: vec![32, 64],
            head: vec![32],
        },
        ..ClassifierConfig::default()
    };
    let mut model = build_model(&classifier, 5).unwrap();
    let tc = TrainConfig {
        batch_size: 10,
        learning_rate: 1e-3,
        epochs: 5,
        seed: 6,
        shuffle: true,
    };
    train(&mut model, &data, &tc).unwrap();
    let mut rng = rng_from(77, &[]);
    let mut worst: f64 = 0.0;
    let mut outside = 0;
    for s in data.iter().take(20) {
        let base = predict(&mut model, &s.points).unwrap();
        if !(base > 0.0 && base < 1.0) {
            outside += 1;
        }
        let mut perm: Vec<usize> = (0..s.points.shape()[0]).collect();
        for _ in 0..100 {
            perm.shuffle(&mut rng);
            let p = predict(&mut model, &permute_rows(&s.points, &perm)).unwrap();
            worst = worst.max((p - base).abs());
        }
    }
    let (fast, secs) = within(t, 60.0);
    Outcome {
        pass: worst < 1e-9 && outside == 0 && fast,
        detail: format!(
            "T-Net classifier trained 5 epochs; 20 samples x 100 permutations, max |dp| = {worst:.2e} (tol 1e-9), {secs:.1}s (limit 60s)"
        ),
    }
}

fn auroc_equivalence() -> Outcome {
    let mut rng = rng_from(2718, &[]);
    let mut worst: f64 = 0.0;
    let mut tied = 0;
    for i in 0..1000 {
        let n = rng.random_range(2..=500usize);
        let levels = if i % 2 == 0 { rng.random_range(2..12u32) } else { 1_000_000 };
        let s: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..levels)) / 7.0).collect();
        let mut y: Vec<f64> = (0..n).map(|_| f64::from(u8::from(rng.random_bool(0.4)))).collect();
        y[0] = 0.0;
        y[1] = 1.0;
        if levels < 100 {
            tied += 1;
        }
        let a = auroc_trapezoid(&s, &y).unwrap();
        let b = auroc_mann_whitney(&s, &y).unwrap();
        worst = worst.max((a - b).abs());
    }
    let s = [0.1, 0.4, 0.35, 0.8];
    let y = [0.0, 0.0, 1.0, 1.0];
    // pairs (0.35,0.1) (0.35,0.4) (0.8,0.1) (0.8,0.4): 3 of 4 concordant
    let hand = 3.0 / 4.0;
    let (t, m) = (auroc_trapezoid(&s, &y).unwrap(), auroc_mann_whitney(&s, &y).unwrap());
    Outcome {
        pass: worst < 1e-12 && t == hand && m == hand,
        detail: format!(
            "1000 instances ({tied} heavily tied), max |trapezoid - Mann-Whitney| = {worst:.2e} (tol 1e-12); hand example {t} / {m} (expected 0.75)"
        ),
    }
}

/// Closed-form volume (ml) of an ellipsoid cut at z = (2t - 1)c, keeping the apex side.
fn cap_volume_ml(a: f64, b: f64, c: f64, t: f64) -> f64 {
    let h = 2.0 * t - 1.0;
    std::f64::consts::PI * a * b * c * (h - h.powi(3) / 3.0 + 2.0 / 3.0) / 1000.0
}

fn volume_estimator() -> Outcome {
    let cloud = |e: TruncatedEllipsoid, seed: u64| {
        let p = VentricleParams::single(e);
        let pts = sample_surface(&p, Structure::LvEndo, 4096, &mut rng_from(seed, &[])).unwrap();
        let mut c = PointCloud::default();
        c.extend(&pts, Structure::LvEndo);
        c
    };
    let mut rng = rng_from(4242, &[]);
    let mut worst: f64 = 0.0;
    for i in 0..50 {
        let (a, b, c, t) = (
            rng.random_range(15.0..35.0),
            rng.random_range(15.0..35.0),
            rng.random_range(35.0..75.0),
            rng.random_range(0.5..1.0),
        );
        let e = TruncatedEllipsoid {
            a,
            b,
            c,
            t,
            center_x: 0.0,
        };
        let v = cavity_volume(&cloud(e, 500 + i), Structure::LvEndo, 50).unwrap().ml;
        let truth = cap_volume_ml(a, b, c, t);
        worst = worst.max((v - truth).abs() / truth);
    }
    let sphere = TruncatedEllipsoid {
        a: 30.0,
        b: 30.0,
        c: 30.0,
        t: 1.0,
        center_x: 0.0,
    };
    let v = cavity_volume(&cloud(sphere, 9), Structure::LvEndo, 50).unwrap().ml;
    let sphere_err = (v - 113.10).abs() / 113.10;
    Outcome {
        pass: worst < 0.03 && sphere_err < 0.03,
        detail: format!(
            "50 draws, worst relative error {:.2}% (tol 3%); sphere r=30 mm {v:.2} ml vs 113.10 ml ({:.2}%)",
            100.0 * worst,
            100.0 * sphere_err
        ),
    }
}

fn misalignment_round_trip() -> Outcome {
    let t = Instant::now();
    let shift_std = 8.0;
    let cfg = CohortConfig {
        points_per_structure: 1,
        ..CohortConfig::default().with_counts(160, 0, 0)
    };
    let mut errors = Vec::new();
    for s in generate_cohort(&cfg, 808).unwrap() {
        let acq = slice_sample(&s, &AcquisitionConfig::default()).unwrap();
        let moved = inject_misalignment(&acq, shift_std, &mut rng_from(808, &[1, s.subject_id as u64])).unwrap();
        let fit = correct_misalignment(&moved).unwrap();
        for (k, slice) in moved.sax.iter().enumerate() {
            if fit.anchor_counts[k] >= 40 {
                let r = fit.recovered[k];
                errors.push((r[0] + slice.shift[0]).hypot(r[1] + slice.shift[1]));
            }
        }
        if errors.len() >= 1000 {
            break;
        }
    }
    errors.truncate(1000);
    let good = errors.iter().filter(|&&e| e <= 0.5).count();
    let (fast, secs) = within(t, 300.0);
    Outcome {
        pass: errors.len() == 1000 && good >= 950 && fast,
        detail: format!(
            "shift_std {shift_std} mm, {} slices with >= 40 anchors, {good} recovered within 0.5 mm (need 950), {secs:.1}s (limit 300s)",
            errors.len()
        ),
    }
}

/// Classifier settings of the table-level criteria.
fn table_harness(seed: u64) -> HarnessConfig {
    HarnessConfig {
        seed,
        classifier: ClassifierConfig {
            use_input_tnet: false,
            use_feature_tnet: false,
            encoder_widths: vec![32, 128],
            head_widths: vec![32, 1],
            dropout_probs: vec![0.1],
            use_batch_norm: true,
            ..ClassifierConfig::default()
        },
        train: TrainConfig {
            batch_size: 20,
            learning_rate: 1e-4,
            epochs: 100,
            seed: 0,
            shuffle: true,
        },
        dropout_grid: vec![vec![0.1]],
        points_per_structure: Some(512),
        normalization: Normalization::UnitSphere,
        ..HarnessConfig::default()
    }
}

fn table_cohort(variant: CohortVariant, prevalent: usize, incident: usize, seed: u64) -> Vec<SubjectSample> {
    let cfg = CohortConfig {
        points_per_structure: 512,
        ..CohortConfig::new(variant).with_counts(200, prevalent, incident)
    };
    generate_cohort(&cfg, seed).unwrap()
}

fn fmt_table(t: &TableReport) -> String {
    t.rows
        .iter()
        .map(|r| format!("{}={:.3}", r.spec.cell_id(), r.mean_auroc))
        .collect::<Vec<_>>()
        .join(" ")
}

fn table_ordering() -> Outcome {
    let t = Instant::now();
    let cohort = table_cohort(CohortVariant::VolumeMatched, 200, 0, 7);
    let table = run_table(Task::Prevalent, &cohort, &table_harness(0)).unwrap();
    let mut ok = true;
    let mut parts = Vec::new();
    for (ri, pi) in table.pairs() {
        let (r, p): (&CellResult, &CellResult) = (&table.rows[ri], &table.rows[pi]);
        let margin = p.mean_auroc - r.mean_auroc;
        let folds = p.folds.iter().zip(&r.folds).filter(|(a, b)| a.auroc > b.auroc).count();
        ok &= margin >= 0.10 && folds >= 3;
        parts.push(format!(
            "{} {}: {:.3} vs {:.3} (+{margin:.3}, {folds}/4 folds)",
            p.spec.anatomy.tag(),
            p.spec.phases.tag(),
            p.mean_auroc,
            r.mean_auroc
        ));
    }
    let (fast, secs) = within(t, 3600.0);
    Outcome {
        pass: ok && fast && table.pairs().len() == 4,
        detail: format!(
            "400 volume-matched subjects; {}; {secs:.0}s (limit 3600s)",
            parts.join("; ")
        ),
    }
}

fn difficulty_ordering() -> Outcome {
    let prevalent = table_cohort(CohortVariant::Dual, 200, 0, 11);
    let incident = table_cohort(CohortVariant::Dual, 0, 200, 12);
    let h = table_harness(0);
    let tp = run_table(Task::Prevalent, &prevalent, &h).unwrap();
    let ti = run_table(Task::Incident, &incident, &h).unwrap();
    let (bp, bi) = (tp.best().unwrap(), ti.best().unwrap());
    let gap = bp.mean_auroc - bi.mean_auroc;
    Outcome {
        pass: gap >= 0.05,
        detail: format!(
            "best prevalent {} {:.3}, best incident {} {:.3}, gap {gap:.3} (need 0.05); prevalent [{}] incident [{}]",
            bp.spec.cell_id(),
            bp.mean_auroc,
            bi.spec.cell_id(),
            bi.mean_auroc,
            fmt_table(&tp),
            fmt_table(&ti)
        ),
    }
}

/// Bayes-optimal AUROC of one EF value, by Monte Carlo from the generating
/// clamped normals scored with their likelihood ratio.
fn bayes_ef_auroc(mu_n: f64, mu_p: f64, sd: f64, draws: usize) -> f64 {
    let mut rng = rng_from(1_000_003, &[]);
    let mut draw = |mu: f64| -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        (mu + sd * z).clamp(0.05, 0.9)
    };
    let log_lr = |x: f64| -> f64 { (-(x - mu_p).powi(2) + (x - mu_n).powi(2)) / (2.0 * sd * sd) };
    let mut scores = Vec::with_capacity(2 * draws);
    let mut labels = Vec::with_capacity(2 * draws);
    for _ in 0..draws {
        scores.push(log_lr(draw(mu_n)));
        labels.push(0.0);
        scores.push(log_lr(draw(mu_p)));
        labels.push(1.0);
    }
    auroc_mann_whitney(&scores, &labels).unwrap()
}

fn regression_sanity() -> Outcome {
    let mut cfg = CohortConfig::new(CohortVariant::GlobalOnly).with_counts(200, 200, 0);
    cfg.points_per_structure = 1024;
    cfg.population = cfg.population.noise_free();
    let cohort = generate_cohort(&cfg, 21).unwrap();
    let spec = ExperimentSpec {
        task: Task::Prevalent,
        anatomy: InputAnatomy::Lv,
        phases: InputPhases::EdEs,
        method: Method::Regression,
    };
    let cell = run_cell(&spec, &cohort, &HarnessConfig::default()).unwrap();
    let (n, p) = (&cfg.normal, &cfg.prevalent);
    assert_eq!(n.volume_change_sd, p.volume_change_sd);
    let bayes = bayes_ef_auroc(n.volume_change_fraction, p.volume_change_fraction, n.volume_change_sd, 1_000_000);
    let diff = (cell.mean_auroc - bayes).abs();
    Outcome {
        pass: diff <= 0.05,
        detail: format!(
            "LV ejection-fraction regression {:.4} vs Bayes-optimal {bayes:.4} (10^6 draws), |diff| {diff:.4} (tol 0.05)",
            cell.mean_auroc
        ),
    }
}

fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "run.log" {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let common = [
        "--seed",
        "99",
        "--n-normal",
        "16",
        "--n-prevalent",
        "12",
        "--n-incident",
        "12",
        "--points-per-structure",
        "256",
    ];
    let net = [
        "--encoder-widths",
        "16,32",
        "--head-widths",
        "16,1",
        "--input-tnet",
        "true",
        "--feature-tnet",
        "true",
        "--tnet-encoder-widths",
        "16,32",
        "--tnet-head-widths",
        "16",
        "--epochs",
        "3",
        "--learning-rate",
        "1e-3",
        "--dropout-grid",
        "0,0.3",
        "--train-points-per-structure",
        "64",
    ];
    let invoke = |cmd: &str, out: &Path, extra: &[&str]| {
        let o = Command::new(env!("CARGO_BIN_EXE_mishape"))
            .arg(cmd)
            .arg("--quiet")
            .arg("--output-dir")
            .arg(out)
            .args(common)
            .args(extra)
            .env_remove("MISHAPE_OUTPUT_ROOT")
            .output()
            .unwrap();
        o.status.success()
    };
    let mut ok = true;
    let mut files = [0usize; 2];
    for (i, (cmd, extra)) in [("generate", &[][..]), ("run", &net[..])].into_iter().enumerate() {
        let (a, b) = (dir.path().join(format!("{cmd}_a")), dir.path().join(format!("{cmd}_b")));
        ok &= invoke(cmd, &a, extra) && invoke(cmd, &b, extra);
        let (sa, sb) = (snapshot(&a), snapshot(&b));
        files[i] = sa.len();
        ok &= sa == sb && !sa.is_empty();
    }
    Outcome {
        pass: ok,
        detail: format!(
            "generate ({} files) and run with nested dropout search over both tables ({} files) byte-identical across two runs",
            files[0], files[1]
        ),
    }
}

fn fold_validity() -> Outcome {
    let labels: Vec<ClassLabel> = CohortConfig::default().labels();
    let counts = [
        (ClassLabel::Normal, 539usize),
        (ClassLabel::PrevalentMi, 294),
        (ClassLabel::IncidentMi, 235),
    ];
    let mut ok = labels.len() == 1068;
    for seed in 0..5u64 {
        let folds = stratified_kfold(&labels, 4, seed).unwrap();
        let mut seen = vec![0u8; labels.len()];
        for f in &folds {
            for &i in &f.validation {
                seen[i] += 1;
            }
            let mut train = f.train.clone();
            train.sort_unstable();
            ok &= f.validation.iter().all(|i| train.binary_search(i).is_err());
            ok &= f.train.len() + f.validation.len() == labels.len();
        }
        ok &= seen.iter().all(|&c| c == 1);
        for (class, total) in counts {
            let per: Vec<usize> = folds
                .iter()
                .map(|f| f.validation.iter().filter(|&&i| labels[i] == class).count())
                .collect();
            let hi = *per.iter().max().unwrap();
            let lo = *per.iter().min().unwrap();
            ok &= hi - lo <= 1 && per.iter().sum::<usize>() == total;
        }
    }
    Outcome {
        pass: ok,
        detail: "539/294/235 labels, 5 seeds: validation splits disjoint and exhaustive, per-class fold counts within 1".into(),
    }
}

fn main() {
    let criteria: Vec<(&str, fn() -> Outcome)> = vec![
        ("gradient suite", gradient_suite),
        ("permutation invariance", permutation_invariance),
        ("AUROC oracle equivalence", auroc_equivalence),
        ("volume estimator", volume_estimator),
        ("misalignment round-trip", misalignment_round_trip),
        ("fold validity", fold_validity),
        ("determinism", determinism),
        ("regression sanity", regression_sanity),
        ("table ordering", table_ordering),
        ("prevalent > incident difficulty", difficulty_ordering),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|k| name.contains(k.as_str())) {
            continue;
        }
        let t = Instant::now();
        let o = f();
        line(name, &o, t.elapsed());
        failed += usize::from(!o.pass);
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
