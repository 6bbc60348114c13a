//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit when any
//! criterion fails. Criteria 7 to 9 share one synthetic training run.

mod common;

use std::collections::HashMap;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use taxonet::dataset::{patient_split, records_in, write_manifest, Split, SplitSpec};
use taxonet::explain::gradcam;
use taxonet::imaging::{center_square_crop, invert_if_needed, preprocess, Photometric, RawImage};
use taxonet::labels::{consistency_report, evaluation_positive, propagate, LabelSet};
use taxonet::metrics::{auc, auc_ci, per_label_report, roc_points, trapezoid, EvalOptions};
use taxonet::model::{
    bce_grad, bce_loss, build_model, lr_at, predict, targets_for, train, InputSource, LabeledSet, MemorySource,
    ModelConfig, RecordSource, TrainConfig,
};
use taxonet::predictions::PredictionMatrix;
use taxonet::synth::write_synthetic;
use taxonet::taxonomy::{load_taxonomy, Taxonomy};

type Outcome = Result<String, String>;

const SEED: u64 = 7;
const SYNTH_IMAGES: usize = 2000;
const SYNTH_SIZE: usize = 299;
const EPOCHS: usize = 15;
const LR_START: f64 = 3e-3;
const LR_END: f64 = 3e-4;
const BUDGET: Duration = Duration::from_secs(20 * 60);

fn data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond { Ok(()) } else { Err(msg()) }
}

fn propagation_correctness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let tax = random_taxonomy(50, &mut rng);
    for k in 0..1000 {
        let small = random_label_set(&tax, 0.05, &mut rng);
        let extra = random_label_set(&tax, 0.05, &mut rng);
        let t = propagate(&tax, &small).map_err(|e| e.to_string())?;
        check(t.is_ancestor_closed(&tax), || format!("set {k} not ancestor-closed"))?;
        check(propagate(&tax, &t.to_label_set(&tax)).unwrap() == t, || format!("set {k} not idempotent"))?;
        let big: LabelSet = small.iter().chain(extra.iter()).cloned().collect();
        let tb = propagate(&tax, &big).unwrap();
        check(t.bits().iter().zip(tb.bits()).all(|(a, b)| !a || *b), || format!("set {k} not monotone"))?;
        for (i, n) in tax.nodes().iter().enumerate() {
            check(evaluation_positive(&tax, &n.id, &small).unwrap() == t.get(i), || {
                format!("set {k}: evaluation_positive disagrees at {}", n.id)
            })?;
        }
    }
    let took = start.elapsed();
    check(took < Duration::from_secs(10), || format!("took {took:?}"))?;
    Ok(format!("1000 label sets on a {}-node forest in {took:.2?}", tax.len()))
}

fn example_fidelity() -> Outcome {
    let tax = load_taxonomy(data("covid_subtree.tax")).map_err(|e| e.to_string())?;
    let set = |ids: &[&str]| -> LabelSet { ids.iter().map(|s| id(s)).collect() };
    let on = |ls: &LabelSet| -> Vec<String> {
        let t = propagate(&tax, ls).unwrap();
        (0..tax.len()).filter(|&i| t.get(i)).map(|i| tax.id_of(i).to_string()).collect()
    };
    let covid = on(&set(&["covid-19"]));
    let expected = ["differential-diagnosis", "pneumonia", "atypical-pneumonia", "viral-pneumonia", "covid-19"];
    check(covid == expected, || format!("{{covid-19}} -> {covid:?}"))?;
    let pneumonia = on(&set(&["pneumonia"]));
    check(!pneumonia.iter().any(|s| s == "covid-19"), || "{pneumonia} sets covid-19".into())?;
    check(pneumonia == ["differential-diagnosis", "pneumonia"], || format!("{{pneumonia}} -> {pneumonia:?}"))?;
    Ok("covid-19 -> 4 ancestors; pneumonia leaves covid-19 at 0".into())
}

fn auc_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut worst: f64 = 0.0;
    for k in 0..200 {
        let n = rng.random_range(2..=200);
        let (scores, labels) = random_instance(n, &mut rng);
        let oracle = pair_auc(&scores, &labels).unwrap();
        let a = auc(&scores, &labels).unwrap().unwrap();
        let trap = trapezoid(&roc_points(&scores, &labels).unwrap().unwrap());
        worst = worst.max((trap - oracle).abs()).max((a - oracle).abs());
        check(worst < 1e-12, || format!("instance {k}: trapezoid {trap} vs pairs {oracle}"))?;
        let flipped: Vec<bool> = labels.iter().map(|l| !l).collect();
        let c = auc(&scores, &flipped).unwrap().unwrap();
        check((a + c - 1.0).abs() < 1e-12, || format!("instance {k}: complement {a} + {c}"))?;
        let negated: Vec<f64> = scores.iter().map(|s| -s).collect();
        check(auc(&negated, &flipped).unwrap().unwrap() == a, || format!("instance {k}: reversal"))?;
        let warped: Vec<f64> = scores.iter().map(|s| (4.0 * s).exp() + s * s * s).collect();
        check(auc(&warped, &labels).unwrap().unwrap() == a, || format!("instance {k}: monotone transform"))?;
    }
    Ok(format!("200 instances, max |trapezoid - pairs| = {worst:.1e}"))
}

fn gradient_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(1..=32);
        let pred: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..0.99)).collect();
        let target: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
        let g = bce_grad(&pred, &target).unwrap();
        for i in 0..n {
            let h = 1e-6;
            let (mut up, mut down) = (pred.clone(), pred.clone());
            up[i] += h;
            down[i] -= h;
            let fd = (bce_loss(&up, &target).unwrap() - bce_loss(&down, &target).unwrap()) / (2.0 * h);
            worst = worst.max((g[i] - fd).abs() / fd.abs());
        }
    }
    check(worst < 1e-4, || format!("max relative error {worst:.2e}"))?;
    let half = bce_loss(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
    let dev = (half - std::f64::consts::LN_2).abs();
    check(dev < 1e-9, || format!("loss at 0.5 is {half}"))?;
    Ok(format!("max relative error {worst:.2e}; |loss(0.5) - ln 2| = {dev:.1e}"))
}

fn schedule_endpoints() -> Outcome {
    let tc = TrainConfig::default();
    let lrs: Vec<f64> = (0..tc.epochs).map(|e| lr_at(e, &tc).unwrap()).collect();
    check(lrs[0] == 1e-3, || format!("first {}", lrs[0]))?;
    check(lrs[tc.epochs - 1] == 1e-6, || format!("last {}", lrs[tc.epochs - 1]))?;
    check(lrs.windows(2).all(|w| w[1] <= w[0]), || "not monotone".into())?;
    Ok(format!("{} epochs, 1e-3 .. 1e-6, non-increasing", tc.epochs))
}

fn patient_disjointness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    for k in 0..100 {
        let patients = rng.random_range(3..40);
        let n = patients + rng.random_range(0..60);
        let records = random_manifest(n, patients, &mut rng);
        let train = rng.random_range(0.1..0.9);
        let val = (1.0 - train) * rng.random_range(0.0..1.0);
        let spec = SplitSpec::new(train, val, 1.0 - train - val, rng.random()).unwrap();
        let a = patient_split(records.clone(), &spec).map_err(|e| format!("manifest {k}: {e}"))?;
        let owners = |s| -> std::collections::HashSet<String> {
            records_in(&a, s).into_iter().map(|r| r.patient_id).collect()
        };
        let (tr, va, te) = (owners(Split::Train), owners(Split::Val), owners(Split::Test));
        check(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te), || {
            format!("manifest {k}: a patient spans two splits")
        })?;
        let b = patient_split(records, &spec).unwrap();
        let (mut ba, mut bb) = (Vec::new(), Vec::new());
        write_manifest(&mut ba, &a, None).unwrap();
        write_manifest(&mut bb, &b, None).unwrap();
        check(ba == bb, || format!("manifest {k}: rerun differs"))?;
    }
    Ok("100 manifests disjoint and byte-identical on rerun".into())
}

fn preprocessing() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let (w, h) = (64, 48);
    let px: Vec<u16> = (0..w * h).map(|_| rng.random_range(0..4096)).collect();
    let inv = invert_if_needed(RawImage::new(w, h, 12, Photometric::Monochrome1, px.clone()).unwrap());
    let back = invert_if_needed(RawImage::new(w, h, 12, Photometric::Monochrome1, inv.pixels().to_vec()).unwrap());
    check(back.pixels() == px.as_slice(), || "inversion is not an involution".into())?;

    let wide: Vec<u16> = (0..1000 * 800).map(|i| (i % 1000) as u16).collect();
    let crop = center_square_crop(RawImage::new(1000, 800, 16, Photometric::Monochrome2, wide).unwrap());
    check((crop.width(), crop.height()) == (800, 800), || format!("crop {}x{}", crop.width(), crop.height()))?;
    check(crop.pixel(0, 0) == 100 && crop.pixel(799, 799) == 899, || "crop offset is not 100".into())?;

    let img = RawImage::new(w, h, 16, Photometric::Monochrome2, px.clone()).unwrap();
    let scaled = RawImage::new(w, h, 16, Photometric::Monochrome2, px.iter().map(|p| 3 * p + 1234).collect()).unwrap();
    let (a, b) = (preprocess(img.clone()), preprocess(scaled));
    let dev = a.pixels().iter().zip(b.pixels()).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
    check(dev < 1e-5, || format!("affine deviation {dev:.2e}"))?;
    let again = preprocess(img);
    check(a.pixels().iter().zip(again.pixels()).all(|(x, y)| x.to_bits() == y.to_bits()), || {
        "rerun is not bit-identical".into()
    })?;
    Ok(format!("involution, 1000x800 -> 800x800 at x=100, affine deviation {dev:.1e}, bit-identical"))
}

fn consistency() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    for name in ["toy.tax", "covid_subtree.tax"] {
        let tax = load_taxonomy(data(name)).map_err(|e| e.to_string())?;
        let rows = 200;
        let mut values = Vec::new();
        for _ in 0..rows {
            let t = propagate(&tax, &random_label_set(&tax, 0.1, &mut rng)).unwrap();
            values.extend(t.bits().iter().map(|&b| f64::from(u8::from(b))));
        }
        let m = PredictionMatrix::new((0..rows).map(|i| format!("r{i}")).collect(), tax.output_ids(true), values)
            .unwrap();
        let r = consistency_report(&tax, &m, 0.5).unwrap();
        check(r.violations == 0 && r.rate == 0.0, || format!("{name}: {} oracle violations", r.violations))?;
    }
    for k in 0..100 {
        let tax = random_taxonomy(rng.random_range(3..40), &mut rng);
        let rows = rng.random_range(1..50);
        let cols = tax.output_ids(true);
        let values = (0..rows * cols.len()).map(|_| rng.random_range(0.0..1.0)).collect();
        let m = PredictionMatrix::new((0..rows).map(|i| format!("r{i}")).collect(), cols, values).unwrap();
        let t = rng.random_range(0.1..0.9);
        let r = consistency_report(&tax, &m, t).unwrap();
        let brute = brute_force_violations(&tax, &m, t);
        check(r.violations == brute, || format!("matrix {k}: {} vs brute force {brute}", r.violations))?;
    }
    Ok("0 violations on oracle targets; 100 random matrices match brute force".into())
}

fn bootstrap_ci() -> Outcome {
    let scores = [0.1, 0.2, 0.3, 0.7, 0.8, 0.9];
    let labels = [false, false, false, true, true, true];
    let ci = auc_ci(&scores, &labels, 2000, SEED).unwrap().unwrap();
    check(ci == (1.0, 1.0), || format!("perfect separation gave {ci:?}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    for k in 0..100 {
        let n = rng.random_range(4..=200);
        let (s, l) = random_instance(n, &mut rng);
        let a = auc(&s, &l).unwrap().unwrap();
        let ci = auc_ci(&s, &l, 2000, k).unwrap().unwrap();
        check(ci == auc_ci(&s, &l, 2000, k).unwrap().unwrap(), || format!("instance {k}: not reproducible"))?;
        check(ci.0 <= a && a <= ci.1, || format!("instance {k}: {a} outside {ci:?}"))?;
    }
    Ok("perfect separation -> (1, 1); 100 seeded intervals reproducible and contain the point AUC".into())
}

struct SyntheticRun {
    tax: Taxonomy,
    per_node: HashMap<String, Option<f64>>,
    avg_auc: Option<f64>,
    localized: usize,
    explained: usize,
    elapsed: Duration,
    best_epoch: usize,
}

fn synthetic_run() -> Result<SyntheticRun, String> {
    let start = Instant::now();
    let err = |e: taxonet::Error| e.to_string();
    let tax = load_taxonomy(data("toy.tax")).map_err(err)?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (records, boxes) = write_synthetic(dir.path(), &tax, SYNTH_IMAGES, SYNTH_SIZE, SEED).map_err(err)?;
    let records = patient_split(records, &SplitSpec::new(0.7, 0.15, 0.15, SEED).map_err(err)?).map_err(err)?;
    let columns = tax.output_ids(false);
    let subset = |s| records_in(&records, s);
    let (tr, va, te) = (subset(Split::Train), subset(Split::Val), subset(Split::Test));
    let load = |recs: &[taxonet::dataset::ImageRecord]| MemorySource::preload(&RecordSource::new(recs, Default::default()));
    let (tr_src, va_src, te_src) = (load(&tr).map_err(err)?, load(&va).map_err(err)?, load(&te).map_err(err)?);
    let tr_set = LabeledSet::new(&tr_src, targets_for(&tax, &tr, &columns).map_err(err)?).map_err(err)?;
    let va_set = LabeledSet::new(&va_src, targets_for(&tax, &va, &columns).map_err(err)?).map_err(err)?;

    let model = build_model(&ModelConfig::with_outputs(columns.len()), SEED).map_err(err)?;
    let tc = TrainConfig {
        epochs: EPOCHS,
        lr_start: LR_START,
        lr_end: LR_END,
        seed: SEED,
        ..TrainConfig::default()
    };
    let (best, history) = train(&model, &tr_set, &va_set, &tc).map_err(err)?;
    let preds = predict(&best, &te_src, &columns, 32).map_err(err)?;
    let truth: HashMap<String, LabelSet> = te.iter().map(|r| (r.image_id.clone(), r.labels.clone())).collect();
    let report = per_label_report(&tax, &preds, &truth, &EvalOptions { n_boot: 0, seed: SEED }).map_err(err)?;

    // GradCAM on every correctly detected planted glyph of the test split
    let (mut localized, mut explained) = (0, 0);
    for row in 0..te_src.len() {
        let image_id = te_src.image_id(row);
        let mut input = None;
        for b in boxes.iter().filter(|b| b.image_id == image_id) {
            let col = columns.iter().position(|c| *c == b.node_id).expect("glyphs mark leaves");
            if preds.get(row, col) < 0.5 {
                continue;
            }
            let input = match &input {
                Some(i) => i,
                None => input.insert(te_src.load(row).map_err(err)?),
            };
            let heat = gradcam(&best, input, image_id, &b.node_id, &columns, None).map_err(err)?;
            explained += 1;
            localized += usize::from(heat.localizes(b));
        }
    }

    Ok(SyntheticRun {
        per_node: report.per_node.iter().map(|r| (r.node.to_string(), r.auc)).collect(),
        avg_auc: report.avg_auc,
        tax,
        localized,
        explained,
        elapsed: start.elapsed(),
        best_epoch: history.best_epoch,
    })
}

fn fmt_auc(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".into(), |a| format!("{a:.3}"))
}

fn end_to_end(run: &SyntheticRun) -> Outcome {
    let leaves: Vec<(String, Option<f64>)> = run
        .tax
        .leaves()
        .into_iter()
        .map(|i| {
            let id = run.tax.id_of(i).to_string();
            let a = run.per_node.get(&id).copied().flatten();
            (id, a)
        })
        .collect();
    let summary = leaves.iter().map(|(id, a)| format!("{id}={}", fmt_auc(*a))).collect::<Vec<_>>().join(" ");
    let detail = format!(
        "avg {} over all nodes, {} leaves, best epoch {}, {:.0?} | {summary}",
        fmt_auc(run.avg_auc),
        leaves.len(),
        run.best_epoch,
        run.elapsed
    );
    check(leaves.len() >= 8, || format!("only {} leaves", leaves.len()))?;
    let weak: Vec<&str> =
        leaves.iter().filter(|(_, a)| !a.is_some_and(|a| a >= 0.95)).map(|(id, _)| id.as_str()).collect();
    check(weak.is_empty(), || format!("leaves below 0.95: {weak:?}; {detail}"))?;
    check(run.avg_auc.is_some_and(|a| a >= 0.90), || format!("average below 0.90; {detail}"))?;
    check(run.elapsed <= BUDGET, || format!("over budget; {detail}"))?;
    Ok(detail)
}

fn internal_nodes(run: &SyntheticRun) -> Outcome {
    let internal: Vec<(String, Option<f64>)> = (0..run.tax.len())
        .filter(|&i| !run.tax.children_indices(i).is_empty())
        .map(|i| {
            let id = run.tax.id_of(i).to_string();
            let a = run.per_node.get(&id).copied().flatten();
            (id, a)
        })
        .collect();
    let detail = internal.iter().map(|(id, a)| format!("{id}={}", fmt_auc(*a))).collect::<Vec<_>>().join(" ");
    let weak: Vec<&str> =
        internal.iter().filter(|(_, a)| !a.is_some_and(|a| a >= 0.85)).map(|(id, _)| id.as_str()).collect();
    check(weak.is_empty(), || format!("internal nodes below 0.85: {weak:?} | {detail}"))?;
    Ok(detail)
}

fn localization(run: &SyntheticRun) -> Outcome {
    check(run.explained > 0, || "no correctly detected glyphs".into())?;
    let rate = run.localized as f64 / run.explained as f64;
    let detail = format!("{}/{} detected glyphs localized ({:.1}%)", run.localized, run.explained, 100.0 * rate);
    check(rate >= 0.80, || detail.clone())?;
    Ok(detail)
}

fn main() {
    let mut results: Vec<(u32, &str, Outcome)> = vec![
        (1, "propagation correctness", propagation_correctness()),
        (2, "example fidelity", example_fidelity()),
        (3, "AUC oracle equivalence", auc_oracle()),
        (4, "BCE gradient check", gradient_check()),
        (5, "schedule endpoints", schedule_endpoints()),
        (6, "patient disjointness", patient_disjointness()),
    ];
    let run = synthetic_run();
    let shared = |f: fn(&SyntheticRun) -> Outcome| match &run {
        Ok(r) => f(r),
        Err(e) => Err(format!("synthetic run failed: {e}")),
    };
    results.push((7, "synthetic end-to-end", shared(end_to_end)));
    results.push((8, "internal-node AUC", shared(internal_nodes)));
    results.push((9, "GradCAM localization", shared(localization)));
    results.push((10, "hierarchy-consistency report", consistency()));
    results.push((11, "preprocessing", preprocessing()));
    results.push((12, "bootstrap CI", bootstrap_ci()));

    let mut failed = 0;
    for (n, name, outcome) in &results {
        match outcome {
            Ok(d) => println!("PASS {n:>2} {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL {n:>2} {name}: {d}");
            }
        }
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
