//! Release acceptance suite: eleven numbered criteria covering metric
//! oracles, gradient correctness, end-to-end quality on the synthetic
//! catalog, decoding equivalences, resampling statistics, and taxonomy
//! analysis. Each test prints one `[PASS] criterion N: ...` line; tolerances
//! and runtime ceilings are pinned next to the assertions they guard.
//!
//! Criteria 5, 6, 8, 9, and 11 share one expensive fixture: a full
//! prepare/train/predict run over the default 2,000-product catalog, built
//! once behind a `OnceLock`. Test names are numbered so the harness executes
//! the suite in criterion order.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use taxpath_core::corpus::{
    encode_product, generate_synthetic_catalog, CategoryPath, EncodedProduct, Product,
    SyntheticConfig, Vocabulary, BOS, EOS, PAD, UNK,
};
use taxpath_core::decode::{beam_decode, greedy_decode, DecodeError, DecodedPath, NextTokenScorer};
use taxpath_core::eval::{crossval_run, stratified_kfold, weighted_prf};
use taxpath_core::experiment::{
    analyze_predicted_paths, bootstrap_predictions, crossval_system, evaluate_predictions,
    load_model, predict_with_ensemble, predict_with_knn, predict_with_model, prepare, save_model,
    sweep_systems, system_names, train_all, DataConfig, DecodeSpec, DecodeStrategy,
    ExperimentConfig, ModelSpec, PredictionRow, PreparedData, TrainSpec, TrainedSystem,
};
use taxpath_core::models::{train, Architecture, Model, ModelConfig, TrainConfig};
use taxpath_core::taxonomy::{path_shape_report, TaxonomyGraph, VerdictKind};
use taxpath_core::tensor::{Tape, Tensor};

/// Assert a wall-clock ceiling and return the measured seconds.
fn finished_within(started: Instant, limit_secs: f64, what: &str) -> f64 {
    let secs = started.elapsed().as_secs_f64();
    assert!(
        secs < limit_secs,
        "{what} took {secs:.1}s, over the {limit_secs:.0}s ceiling"
    );
    secs
}

// ---------------------------------------------------------------------------
// Shared end-to-end fixture.

struct E2e {
    cfg: ExperimentConfig,
    data: PreparedData,
    test: Vec<Product>,
    systems: Vec<TrainedSystem>,
    /// Test-set predictions keyed by system name.
    rows: BTreeMap<String, Vec<PredictionRow>>,
    build_secs: f64,
}

impl E2e {
    fn rows(&self, system: &str) -> &[PredictionRow] {
        &self.rows[system]
    }

    fn weighted_f1(&self, system: &str) -> f64 {
        evaluate_predictions(self.rows(system), &self.test)
            .expect("aligned predictions")
            .weighted_f1
    }
}

fn e2e() -> &'static E2e {
    static E2E: OnceLock<E2e> = OnceLock::new();
    E2E.get_or_init(|| {
        let started = Instant::now();
        let mut cfg = ExperimentConfig::desk_default("acceptance-out");
        cfg.seed = 11;
        // A slightly lighter decoy rate than the synthetic default keeps the
        // generator's sibling-vocabulary overlap as the dominant difficulty:
        // titles that merely lean toward their class defeat nearest-neighbor
        // retrieval yet stay learnable from aggregate word statistics, which
        // is the regime this suite means to exercise.
        if let DataConfig::Synthetic { config } = &mut cfg.data {
            config.title_noise = 0.20;
        }
        // The recurrent model converges more slowly than the transformer at
        // the shared desk defaults; a hotter rate, more hidden state, lighter
        // dropout, and a longer epoch cap (early stopping still active) let
        // it reach its plateau too.
        cfg.models[0].learning_rate = 2e-3;
        cfg.models[0].rnn_hidden = 192;
        cfg.models[0].dropout = 0.1;
        cfg.train.max_epochs = 80;
        cfg.train.patience = 10;
        let data = prepare(&cfg).expect("prepare succeeds on the default catalog");
        eprintln!(
            "e2e fixture: {} products, {} train / {} val / {} test, vocab {}/{}",
            data.products.len(),
            data.split.train.len(),
            data.split.validation.len(),
            data.split.test.len(),
            data.src_vocab.len(),
            data.tgt_vocab.len()
        );
        let systems = train_all(&cfg, &data).expect("both architectures train");
        for sys in &systems {
            let best = &sys.history.epochs[sys.history.best_epoch - 1];
            eprintln!(
                "e2e fixture: {} best epoch {} train loss {:.4} val loss {:.4} ({} epochs run)",
                sys.name,
                sys.history.best_epoch,
                best.train_loss,
                best.val_loss,
                sys.history.epochs.len()
            );
        }
        let train_set = data.train_products();
        let test = data.test_products();
        let names = system_names(&cfg);
        let mut rows = BTreeMap::new();
        rows.insert(
            names[0].clone(),
            predict_with_model(&systems[0].model, &data.src_vocab, &data.tgt_vocab, &test, &cfg.decode)
                .expect("rnn predictions"),
        );
        rows.insert(
            names[1].clone(),
            predict_with_model(&systems[1].model, &data.src_vocab, &data.tgt_vocab, &test, &cfg.decode)
                .expect("transformer predictions"),
        );
        rows.insert(
            "ensemble".to_string(),
            predict_with_ensemble(
                &[&systems[0].model, &systems[1].model],
                &data.src_vocab,
                &data.tgt_vocab,
                &test,
                &cfg.decode,
            )
            .expect("ensemble predictions"),
        );
        rows.insert(
            "knn".to_string(),
            predict_with_knn(&train_set, &test).expect("knn predictions"),
        );
        for (name, rows) in &rows {
            let wf = evaluate_predictions(rows, &test).expect("aligned").weighted_f1;
            eprintln!("e2e fixture: {name} test wF {wf:.4}");
        }
        E2e {
            build_secs: started.elapsed().as_secs_f64(),
            cfg,
            data,
            test,
            systems,
            rows,
        }
    })
}

// ---------------------------------------------------------------------------
// Criterion 1: weighted metrics match a brute-force oracle.

/// Straight-off-the-definition per-class metrics: scan the label vectors
/// once per class, no interning, no shared counting code.
fn oracle_class_prf(preds: &[String], golds: &[String], class: &str) -> (f64, f64, f64, usize) {
    let support = golds.iter().filter(|g| g.as_str() == class).count();
    let predicted = preds.iter().filter(|p| p.as_str() == class).count();
    let tp = golds
        .iter()
        .zip(preds)
        .filter(|(g, p)| g.as_str() == class && p.as_str() == class)
        .count();
    let precision = if predicted > 0 { tp as f64 / predicted as f64 } else { 0.0 };
    let recall = if support > 0 { tp as f64 / support as f64 } else { 0.0 };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    (precision, recall, f1, support)
}

fn oracle_weighted_prf(preds: &[String], golds: &[String]) -> (f64, f64, f64) {
    let classes: BTreeSet<&String> = golds.iter().collect();
    let n = golds.len() as f64;
    let (mut wp, mut wr, mut wf) = (0.0, 0.0, 0.0);
    for class in classes {
        let (p, r, f, support) = oracle_class_prf(preds, golds, class);
        let weight = support as f64 / n;
        wp += weight * p;
        wr += weight * r;
        wf += weight * f;
    }
    (wp, wr, wf)
}

#[test]
fn criterion_01_weighted_metrics_match_the_brute_force_oracle() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC1);
    let tol = 1e-12;
    for case in 0..1000 {
        let n = rng.gen_range(1..=20);
        let k = rng.gen_range(1..=5);
        let golds: Vec<String> = (0..n).map(|_| format!("c{}", rng.gen_range(0..k))).collect();
        let preds: Vec<String> = golds
            .iter()
            .map(|g| {
                if rng.gen_bool(0.6) {
                    g.clone()
                } else {
                    format!("c{}", rng.gen_range(0..k))
                }
            })
            .collect();
        let report = weighted_prf(&preds, &golds).expect("non-empty same-length inputs");
        let (wp, wr, wf) = oracle_weighted_prf(&preds, &golds);
        assert!(
            (report.weighted_precision - wp).abs() <= tol
                && (report.weighted_recall - wr).abs() <= tol
                && (report.weighted_f1 - wf).abs() <= tol,
            "case {case}: weighted metrics diverge from the oracle: \
             ({:.17}, {:.17}, {:.17}) vs ({wp:.17}, {wr:.17}, {wf:.17})",
            report.weighted_precision,
            report.weighted_recall,
            report.weighted_f1,
        );
        for (class, m) in &report.per_class {
            let (p, r, f, support) = oracle_class_prf(&preds, &golds, class);
            assert_eq!(m.support, support, "case {case} class {class}: support");
            assert!(
                (m.precision - p).abs() <= tol
                    && (m.recall - r).abs() <= tol
                    && (m.f1 - f).abs() <= tol,
                "case {case} class {class}: per-class metrics diverge"
            );
        }
        let exact = golds.iter().zip(&preds).filter(|(g, p)| g == p).count();
        assert_eq!(report.exact_matches, exact, "case {case}: exact matches");
    }
    let secs = finished_within(started, 10.0, "metric oracle comparison");
    println!(
        "[PASS] criterion 1: weighted_prf matches the brute-force oracle on 1000 instances \
         to 1e-12 ({secs:.2}s)"
    );
}

// ---------------------------------------------------------------------------
// Criterion 2: a confusion table whose weighted F1 escapes [wP, wR].

#[test]
fn criterion_02_weighted_f1_can_fall_outside_the_precision_recall_interval() {
    // Gold: 10 a, 10 b, 30 c. Predictions: one gold-a item keeps its label,
    // everything else collapses onto b. Per class: a has P=1, R=0.1; b has
    // P=10/49, R=1; c is never predicted. The harmonic mean punishes the
    // lopsided classes so hard that the weighted F1 drops below both
    // weighted P and weighted R.
    let mut golds = Vec::new();
    let mut preds = Vec::new();
    golds.push("a".to_string());
    preds.push("a".to_string());
    for _ in 0..9 {
        golds.push("a".to_string());
        preds.push("b".to_string());
    }
    for _ in 0..10 {
        golds.push("b".to_string());
        preds.push("b".to_string());
    }
    for _ in 0..30 {
        golds.push("c".to_string());
        preds.push("b".to_string());
    }
    let report = weighted_prf(&preds, &golds).unwrap();
    let expect_wp = 0.2 + 2.0 / 49.0;
    let expect_wr = 0.22;
    let expect_wf = 0.4 / 11.0 + 4.0 / 59.0;
    assert!((report.weighted_precision - expect_wp).abs() < 1e-12);
    assert!((report.weighted_recall - expect_wr).abs() < 1e-12);
    assert!((report.weighted_f1 - expect_wf).abs() < 1e-12);
    let lo = report.weighted_precision.min(report.weighted_recall);
    assert!(
        report.weighted_f1 < lo,
        "this table must exhibit wF ({}) below both wP ({}) and wR ({})",
        report.weighted_f1,
        report.weighted_precision,
        report.weighted_recall
    );
    println!(
        "[PASS] criterion 2: confusion table with wF {:.4} outside [wP {:.4}, wR {:.4}]",
        report.weighted_f1, report.weighted_precision, report.weighted_recall
    );
}

// ---------------------------------------------------------------------------
// Criterion 3: finite-difference gradient checks.

/// Relative error with a floor so near-zero gradient pairs do not explode
/// the ratio; anything real is orders of magnitude below the tolerance.
fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Reduce any tensor to a scalar through a fixed full-rank weighting, so
/// every output element contributes a distinct gradient signal.
fn weighted_scalar(tape: &Tape, t: &Tensor) -> Tensor {
    let (rows, cols) = t.shape();
    let weights: Vec<f64> = (0..rows * cols)
        .map(|i| {
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            sign * (0.3 + 0.07 * i as f64)
        })
        .collect();
    let w = tape.constant(weights, rows, cols).unwrap();
    t.mul(&w).unwrap().sum().unwrap()
}

/// Check one op: build the graph twice per perturbed element and compare
/// central finite differences against the taped gradient of every input.
fn finite_difference_check(
    name: &str,
    inputs: &[(usize, usize, Vec<f64>)],
    build: &dyn Fn(&Tape, &[Tensor]) -> Tensor,
) {
    let make = |perturb: Option<(usize, usize, f64)>| -> (Tape, Vec<Vec<f64>>) {
        let data: Vec<Vec<f64>> = inputs
            .iter()
            .enumerate()
            .map(|(k, (_, _, d))| {
                let mut d = d.clone();
                if let Some((pk, pj, h)) = perturb {
                    if pk == k {
                        d[pj] += h;
                    }
                }
                d
            })
            .collect();
        (Tape::new(), data)
    };

    let (tape, data) = make(None);
    let leaves: Vec<Tensor> = inputs
        .iter()
        .zip(&data)
        .map(|((r, c, _), d)| tape.leaf(d.clone(), *r, *c).unwrap())
        .collect();
    let out = build(&tape, &leaves);
    assert_eq!(out.shape(), (1, 1), "op {name}: check must end in a scalar");
    out.backward().unwrap();
    let grads: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.len()]))
        .collect();

    let h = 1e-5;
    let eval = |pk: usize, pj: usize, delta: f64| -> f64 {
        let (tape, data) = make(Some((pk, pj, delta)));
        let leaves: Vec<Tensor> = inputs
            .iter()
            .zip(&data)
            .map(|((r, c, _), d)| tape.leaf(d.clone(), *r, *c).unwrap())
            .collect();
        build(&tape, &leaves).item().unwrap()
    };
    for (k, (_, _, d)) in inputs.iter().enumerate() {
        for j in 0..d.len() {
            let numeric = (eval(k, j, h) - eval(k, j, -h)) / (2.0 * h);
            let analytic = grads[k][j];
            let rel = rel_err(analytic, numeric, 1e-3);
            assert!(
                rel < 1e-4,
                "op {name}, input {k}, element {j}: analytic {analytic:.12e} \
                 vs numeric {numeric:.12e} (rel {rel:.3e})"
            );
        }
    }
}

/// Deterministic pseudo-random data away from kinks (|x| >= 0.1 after the
/// offset), so relu and friends differentiate cleanly.
fn fd_data(len: usize, salt: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xFD ^ salt);
    (0..len)
        .map(|_| {
            let magnitude = 0.1 + 0.9 * rng.gen::<f64>();
            if rng.gen_bool(0.5) {
                magnitude
            } else {
                -magnitude
            }
        })
        .collect()
}

fn check_every_op() {
    type Build = Box<dyn Fn(&Tape, &[Tensor]) -> Tensor>;
    let a23 = || (2usize, 3usize, fd_data(6, 1));
    let b23 = || (2usize, 3usize, fd_data(6, 2));
    let cases: Vec<(&str, Vec<(usize, usize, Vec<f64>)>, Build)> = vec![
        (
            "add",
            vec![a23(), b23()],
            Box::new(|t, l| weighted_scalar(t, &l[0].add(&l[1]).unwrap())),
        ),
        (
            "sub",
            vec![a23(), b23()],
            Box::new(|t, l| weighted_scalar(t, &l[0].sub(&l[1]).unwrap())),
        ),
        (
            "mul",
            vec![a23(), b23()],
            Box::new(|t, l| weighted_scalar(t, &l[0].mul(&l[1]).unwrap())),
        ),
        (
            "scale",
            vec![a23()],
            Box::new(|t, l| weighted_scalar(t, &l[0].scale(-1.7).unwrap())),
        ),
        (
            "matmul",
            vec![(2, 3, fd_data(6, 3)), (3, 4, fd_data(12, 4))],
            Box::new(|t, l| weighted_scalar(t, &l[0].matmul(&l[1]).unwrap())),
        ),
        (
            "matmul_nt",
            vec![(2, 3, fd_data(6, 5)), (4, 3, fd_data(12, 6))],
            Box::new(|t, l| weighted_scalar(t, &l[0].matmul_nt(&l[1]).unwrap())),
        ),
        (
            "concat_cols",
            vec![a23(), (2, 2, fd_data(4, 7))],
            Box::new(|t, l| weighted_scalar(t, &t.concat_cols(&[&l[0], &l[1]]).unwrap())),
        ),
        (
            "concat_rows",
            vec![a23(), (1, 3, fd_data(3, 8))],
            Box::new(|t, l| weighted_scalar(t, &t.concat_rows(&[&l[0], &l[1]]).unwrap())),
        ),
        (
            "slice_cols",
            vec![(2, 4, fd_data(8, 9))],
            Box::new(|t, l| weighted_scalar(t, &l[0].slice_cols(1, 3).unwrap())),
        ),
        (
            "slice_rows",
            vec![(3, 2, fd_data(6, 10))],
            Box::new(|t, l| weighted_scalar(t, &l[0].slice_rows(0, 2).unwrap())),
        ),
        (
            "reshape",
            vec![(2, 6, fd_data(12, 11))],
            Box::new(|t, l| weighted_scalar(t, &l[0].reshape(3, 4).unwrap())),
        ),
        (
            "expand_rows",
            vec![(1, 4, fd_data(4, 12))],
            Box::new(|t, l| weighted_scalar(t, &l[0].expand_rows(3).unwrap())),
        ),
        (
            "sum_cols",
            vec![(3, 4, fd_data(12, 13))],
            Box::new(|t, l| weighted_scalar(t, &l[0].sum_cols().unwrap())),
        ),
        (
            "mul_colvec",
            vec![(3, 4, fd_data(12, 14)), (3, 1, fd_data(3, 15))],
            Box::new(|t, l| weighted_scalar(t, &l[0].mul_colvec(&l[1]).unwrap())),
        ),
        (
            "sum",
            vec![a23()],
            Box::new(|_, l| l[0].sum().unwrap()),
        ),
        (
            "embedding_lookup",
            vec![(5, 3, fd_data(15, 16))],
            Box::new(|t, l| weighted_scalar(t, &l[0].embedding_lookup(&[0, 2, 2, 4]).unwrap())),
        ),
        (
            "softmax",
            vec![(2, 5, fd_data(10, 17))],
            Box::new(|t, l| weighted_scalar(t, &l[0].softmax().unwrap())),
        ),
        (
            "log_softmax",
            vec![(2, 5, fd_data(10, 18))],
            Box::new(|t, l| weighted_scalar(t, &l[0].log_softmax().unwrap())),
        ),
        (
            "tanh",
            vec![a23()],
            Box::new(|t, l| weighted_scalar(t, &l[0].tanh().unwrap())),
        ),
        (
            "sigmoid",
            vec![a23()],
            Box::new(|t, l| weighted_scalar(t, &l[0].sigmoid().unwrap())),
        ),
        (
            "relu",
            vec![a23()],
            Box::new(|t, l| weighted_scalar(t, &l[0].relu().unwrap())),
        ),
        (
            "layer_norm",
            vec![(2, 4, fd_data(8, 19)), (1, 4, fd_data(4, 20)), (1, 4, fd_data(4, 21))],
            Box::new(|t, l| weighted_scalar(t, &l[0].layer_norm(&l[1], &l[2]).unwrap())),
        ),
        (
            "dropout",
            vec![(3, 4, fd_data(12, 22))],
            Box::new(|t, l| weighted_scalar(t, &l[0].dropout(0.4, 9).unwrap())),
        ),
        (
            "cross_entropy",
            vec![(3, 5, fd_data(15, 23))],
            Box::new(|_, l| l[0].cross_entropy(&[1, 4, 0], PAD).unwrap()),
        ),
    ];
    for (name, inputs, build) in &cases {
        finite_difference_check(name, inputs, build.as_ref());
    }
}

fn toy_model_config(architecture: Architecture) -> ModelConfig {
    ModelConfig {
        architecture,
        embed_dim: 4,
        rnn_hidden: 5,
        ffn_hidden: 8,
        layers: 1,
        attention_heads: 2,
        dropout: 0.0,
        max_source_len: 6,
        max_target_len: 5,
        src_vocab_size: 9,
        tgt_vocab_size: 8,
        seed: 77,
    }
}

fn toy_examples() -> Vec<EncodedProduct> {
    vec![
        EncodedProduct {
            product_id: 0,
            source: vec![4, 5, 6],
            target: vec![BOS, 4, 5, EOS],
            target_has_unk: false,
        },
        EncodedProduct {
            product_id: 1,
            source: vec![7, 8],
            target: vec![BOS, 6, EOS],
            target_has_unk: false,
        },
        EncodedProduct {
            product_id: 2,
            source: vec![5, 8, 6, 4],
            target: vec![BOS, 7, 5, EOS],
            target_has_unk: false,
        },
    ]
}

/// Central finite differences over every parameter element of a full model,
/// through the public loss-and-gradients entry point.
fn check_whole_model(architecture: Architecture) {
    let mut model = Model::build(toy_model_config(architecture)).unwrap();
    let data = toy_examples();
    let (_, grads) = model.loss_and_gradients(&data, 0).unwrap();
    let names: Vec<String> = model.params.names().map(str::to_owned).collect();
    let h = 1e-5;
    for name in &names {
        let baseline = model.params.get(name).unwrap().to_vec();
        let zero = vec![0.0; baseline.len()];
        let analytic = grads.get(name).unwrap_or(&zero);
        for j in 0..baseline.len() {
            let mut probe = baseline.clone();
            probe[j] = baseline[j] + h;
            model.params.set(name, probe).unwrap();
            let up = model.loss_and_gradients(&data, 0).unwrap().0;
            let mut probe = baseline.clone();
            probe[j] = baseline[j] - h;
            model.params.set(name, probe).unwrap();
            let down = model.loss_and_gradients(&data, 0).unwrap().0;
            model.params.set(name, baseline.clone()).unwrap();
            let numeric = (up - down) / (2.0 * h);
            let rel = rel_err(analytic[j], numeric, 1e-2);
            assert!(
                rel < 1e-4,
                "{architecture} parameter {name}[{j}]: analytic {:.12e} vs \
                 numeric {numeric:.12e} (rel {rel:.3e})",
                analytic[j]
            );
        }
    }
}

#[test]
fn criterion_03_gradients_match_central_finite_differences() {
    let started = Instant::now();
    check_every_op();
    check_whole_model(Architecture::RnnAttention);
    check_whole_model(Architecture::Transformer);
    let secs = finished_within(started, 60.0, "finite-difference checks");
    println!(
        "[PASS] criterion 3: every op and both model forwards pass central \
         finite differences at rel < 1e-4 ({secs:.1}s)"
    );
}

// ---------------------------------------------------------------------------
// Criterion 4: memorization sanity at desk scale.

fn memorization_set() -> Vec<Product> {
    let cfg = SyntheticConfig {
        num_classes: 12,
        depth_min: 2,
        depth_max: 3,
        skew_exponent: 0.6,
        num_products: 50,
        title_noise: 0.05,
        seed: 3,
    };
    let products = generate_synthetic_catalog(&cfg).unwrap();
    // Memorization needs a consistent mapping: identical token sequences
    // labeled with two different paths would cap accuracy below 100%.
    let mut seen: HashMap<String, String> = HashMap::new();
    for p in &products {
        let title = p.title_tokens.join(" ");
        if let Some(class) = seen.get(&title) {
            assert_eq!(class, &p.class(), "catalog seed produced a conflicting duplicate title");
        }
        seen.insert(title, p.class());
    }
    products
}

fn exact_train_accuracy(
    model: &Model,
    src: &Vocabulary,
    tgt: &Vocabulary,
    products: &[Product],
) -> f64 {
    let greedy = DecodeSpec {
        strategy: DecodeStrategy::Greedy,
        beam_size: 1,
        ensemble: Vec::new(),
    };
    let rows = predict_with_model(model, src, tgt, products, &greedy).unwrap();
    let hits = rows
        .iter()
        .zip(products)
        .filter(|(row, p)| {
            assert_eq!(row.product_id, p.id);
            row.predicted == p.class()
        })
        .count();
    hits as f64 / products.len() as f64
}

fn memorize(architecture: Architecture, products: &[Product]) -> (f64, usize, f64) {
    let started = Instant::now();
    let src = Vocabulary::build(products.iter().map(|p| &p.title_tokens), 10_000).unwrap();
    let tgt = Vocabulary::build(products.iter().map(|p| p.gold_path.nodes()), 4_000).unwrap();
    let encoded: Vec<EncodedProduct> = products
        .iter()
        .map(|p| {
            let e = encode_product(p, &src, &tgt).unwrap();
            assert!(!e.target_has_unk);
            e
        })
        .collect();
    let mut model =
        Model::build(ModelConfig::desk_scale(architecture, src.len(), tgt.len(), 41)).unwrap();
    // Desk-scale model; training runs in chunks of 25 epochs with an
    // accuracy check after each, never exceeding the 200-epoch budget. The
    // short warmup matters for the transformer: two batches per epoch would
    // otherwise keep its learning rate ramping for the whole run.
    let mut tcfg = TrainConfig::desk_scale(architecture, 17);
    tcfg.max_epochs = 25;
    tcfg.patience = 25;
    tcfg.warmup_steps = 30;
    let mut epochs_run = 0usize;
    let mut accuracy = 0.0;
    while epochs_run < 200 {
        train(&mut model, &tcfg, &encoded, &encoded).unwrap();
        epochs_run += tcfg.max_epochs;
        accuracy = exact_train_accuracy(&model, &src, &tgt, products);
        if accuracy >= 0.98 {
            break;
        }
    }
    (accuracy, epochs_run, started.elapsed().as_secs_f64())
}

#[test]
fn criterion_04_both_architectures_memorize_fifty_products() {
    let products = memorization_set();
    let mut notes = Vec::new();
    for architecture in [Architecture::RnnAttention, Architecture::Transformer] {
        let (accuracy, epochs, secs) = memorize(architecture, &products);
        assert!(
            accuracy >= 0.98,
            "{architecture} reached only {:.1}% exact-path accuracy after {epochs} epochs",
            accuracy * 100.0
        );
        assert!(
            secs < 300.0,
            "{architecture} memorization took {secs:.0}s, over the 300s ceiling"
        );
        notes.push(format!(
            "{architecture} {:.0}% in {epochs} epochs ({secs:.0}s)",
            accuracy * 100.0
        ));
    }
    println!(
        "[PASS] criterion 4: 50-product memorization at desk scale: {}",
        notes.join(", ")
    );
}

// ---------------------------------------------------------------------------
// Criterion 5: end-to-end synthetic experiment.

#[test]
fn criterion_05_end_to_end_ensemble_and_translation_beat_the_baseline() {
    let fx = e2e();
    assert!(
        fx.build_secs < 1200.0,
        "end-to-end fixture took {:.0}s, over the 1200s ceiling",
        fx.build_secs
    );
    let rnn = fx.weighted_f1("rnn_attention");
    let tx = fx.weighted_f1("transformer");
    let ens = fx.weighted_f1("ensemble");
    let knn = fx.weighted_f1("knn");
    let best_single = rnn.max(tx);
    assert!(
        ens >= best_single - 0.01,
        "ensemble wF {ens:.4} trails the best single model {best_single:.4} \
         by more than one F-point"
    );
    for (name, score) in [("rnn_attention", rnn), ("transformer", tx), ("ensemble", ens)] {
        assert!(
            score > knn,
            "{name} wF {score:.4} does not beat the nearest-neighbor baseline {knn:.4}"
        );
    }
    println!(
        "[PASS] criterion 5: e2e on 2000 products / 60 classes: wF rnn {rnn:.4}, \
         transformer {tx:.4}, ensemble {ens:.4}, knn {knn:.4} ({:.0}s)",
        fx.build_secs
    );
}

// ---------------------------------------------------------------------------
// Criterion 6: an ensemble of identical checkpoints is the single model.

#[test]
fn criterion_06_twin_checkpoint_ensemble_equals_the_single_model() {
    let fx = e2e();
    let dir = tempfile::tempdir().unwrap();
    let hash = fx.cfg.config_hash();
    let first = dir.path().join("first.ckpt");
    let second = dir.path().join("second.ckpt");
    save_model(&first, "rnn_attention", &fx.systems[0].model, &hash, fx.cfg.seed).unwrap();
    save_model(&second, "rnn_attention", &fx.systems[0].model, &hash, fx.cfg.seed).unwrap();
    assert_eq!(
        std::fs::read(&first).unwrap(),
        std::fs::read(&second).unwrap(),
        "checkpoints of one model must be bit-identical"
    );
    let (twin_a, _) = load_model(&first).unwrap();
    let (twin_b, _) = load_model(&second).unwrap();
    let twin_rows = predict_with_ensemble(
        &[&twin_a, &twin_b],
        &fx.data.src_vocab,
        &fx.data.tgt_vocab,
        &fx.test,
        &fx.cfg.decode,
    )
    .unwrap();
    let single_rows = fx.rows("rnn_attention");
    assert_eq!(twin_rows.len(), single_rows.len());
    for (twin, single) in twin_rows.iter().zip(single_rows) {
        assert_eq!(twin.product_id, single.product_id);
        assert_eq!(
            twin.predicted, single.predicted,
            "product {}: twin ensemble diverged from the single model",
            twin.product_id
        );
        assert!(
            (twin.score - single.score).abs() < 1e-9,
            "product {}: twin ensemble score {} vs single {}",
            twin.product_id,
            twin.score,
            single.score
        );
    }
    println!(
        "[PASS] criterion 6: twin-checkpoint ensemble reproduces the single model \
         on all {} test products",
        single_rows.len()
    );
}

// ---------------------------------------------------------------------------
// Criterion 7: beam search against exhaustive enumeration.

/// Fixed-table scorer over a six-token vocabulary; probabilities depend only
/// on the last emitted token.
struct TableScorer;

impl TableScorer {
    fn probs(prefix: &[usize]) -> [f64; 6] {
        match prefix.last() {
            None => [0.01, 0.04, 0.01, 0.10, 0.50, 0.34],
            Some(4) => [0.01, 0.02, 0.01, 0.60, 0.18, 0.18],
            Some(5) => [0.01, 0.03, 0.01, 0.30, 0.40, 0.25],
            Some(1) => [0.05, 0.05, 0.05, 0.45, 0.20, 0.20],
            Some(_) => [0.10, 0.10, 0.10, 0.40, 0.15, 0.15],
        }
    }
}

impl NextTokenScorer for TableScorer {
    fn vocab_size(&self) -> usize {
        6
    }

    fn next_log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>, DecodeError> {
        Ok(Self::probs(prefix).iter().map(|p| p.ln()).collect())
    }
}

/// Every hypothesis the decoder could form in two steps: EOS immediately,
/// or one non-special token followed by any allowed token. PAD and BOS are
/// never emitted; EOS ends a sequence.
fn enumerate_two_step() -> Vec<DecodedPath> {
    let mut hypotheses: Vec<(Vec<usize>, f64)> = Vec::new();
    let first = TableScorer::probs(&[]);
    hypotheses.push((vec![EOS], first[EOS].ln()));
    for t1 in [UNK, 4, 5] {
        let lp1 = first[t1].ln();
        let second = TableScorer::probs(&[t1]);
        for t2 in [UNK, EOS, 4, 5] {
            hypotheses.push((vec![t1, t2], lp1 + second[t2].ln()));
        }
    }
    hypotheses.sort_by(|a, b| {
        let na = a.1 / a.0.len() as f64;
        let nb = b.1 / b.0.len() as f64;
        nb.total_cmp(&na).then_with(|| a.0.cmp(&b.0))
    });
    hypotheses
        .into_iter()
        .map(|(token_ids, log_prob)| {
            let score = log_prob / token_ids.len() as f64;
            let truncated = token_ids.last() != Some(&EOS);
            let tokens: Vec<usize> = if truncated {
                token_ids
            } else {
                token_ids[..token_ids.len() - 1].to_vec()
            };
            DecodedPath {
                has_unk: tokens.contains(&UNK),
                tokens,
                log_prob,
                score,
                truncated,
            }
        })
        .collect()
}

#[test]
fn criterion_07_beam_search_matches_exhaustive_enumeration_and_greedy() {
    // Beam wide enough to hold every candidate: 36 = vocab^max_len covers
    // the 13 reachable hypotheses, so nothing is ever pruned.
    let beam = beam_decode(&mut TableScorer, 36, 2).unwrap();
    let oracle = enumerate_two_step();
    assert_eq!(beam.len(), oracle.len(), "beam must surface every hypothesis");
    assert_eq!(beam, oracle, "beam ranking differs from exhaustive enumeration");
    // The deliberate [4,4]/[4,5] probability tie must resolve toward the
    // lexicographically smaller sequence.
    let pos_xx = beam.iter().position(|p| p.tokens == [4, 4]).unwrap();
    let pos_xy = beam.iter().position(|p| p.tokens == [4, 5]).unwrap();
    assert!(pos_xx < pos_xy, "ties must break toward the smaller sequence");

    // beam_size = 1 equals greedy, on the toy table and on a trained model.
    let narrow = beam_decode(&mut TableScorer, 1, 8).unwrap();
    let greedy = greedy_decode(&mut TableScorer, 8).unwrap();
    assert_eq!(narrow[0], greedy);
    let fx = e2e();
    let model = &fx.systems[0].model;
    for p in fx.test.iter().take(10) {
        let ids: Vec<usize> = p
            .title_tokens
            .iter()
            .map(|t| fx.data.src_vocab.id_or_unk(t))
            .take(model.config.max_source_len)
            .collect();
        let mut scorer = model.scorer(&ids).unwrap();
        let greedy = greedy_decode(&mut scorer, model.config.max_target_len).unwrap();
        let mut scorer = model.scorer(&ids).unwrap();
        let narrow = beam_decode(&mut scorer, 1, model.config.max_target_len).unwrap();
        assert_eq!(narrow[0], greedy, "product {}: beam-1 differs from greedy", p.id);
    }
    println!(
        "[PASS] criterion 7: beam {} reproduces the {}-hypothesis exhaustive ranking; \
         beam-1 equals greedy on the toy table and 10 model decodes",
        36,
        oracle.len()
    );
}

// ---------------------------------------------------------------------------
// Criterion 8: bootstrap confidence intervals.

#[test]
fn criterion_08_bootstrap_brackets_the_point_estimate() {
    let fx = e2e();
    let rows = fx.rows("ensemble");
    let started = Instant::now();
    let report = bootstrap_predictions(rows, &fx.test, 1000, 2024).unwrap();
    let secs = finished_within(started, 30.0, "1000-iteration bootstrap");
    assert_eq!(report.iterations, 1000);
    for (name, interval) in [
        ("precision", &report.precision),
        ("recall", &report.recall),
        ("f1", &report.f1),
    ] {
        assert!(
            interval.p5 <= interval.point && interval.point <= interval.p95,
            "{name}: point {} outside [{}, {}]",
            interval.point,
            interval.p5,
            interval.p95
        );
        assert!(interval.p5 <= interval.p95);
    }
    // Deterministic per seed.
    let again = bootstrap_predictions(rows, &fx.test, 1000, 2024).unwrap();
    assert_eq!(report, again, "same seed must reproduce the same intervals");

    // All-correct input degenerates to [1, 1] on every metric.
    let golds: Vec<String> = fx.test.iter().take(25).map(|p| p.class()).collect();
    let perfect = taxpath_core::eval::bootstrap_ci(&golds, &golds, 1000, 7).unwrap();
    for interval in [&perfect.precision, &perfect.recall, &perfect.f1] {
        assert_eq!(interval.point, 1.0);
        assert_eq!(interval.p5, 1.0);
        assert_eq!(interval.p95, 1.0);
    }
    println!(
        "[PASS] criterion 8: bootstrap wF {:.4} in [{:.4}, {:.4}], deterministic, \
         all-correct degenerates to [1, 1] ({secs:.1}s)",
        report.f1.point, report.f1.p5, report.f1.p95
    );
}

// ---------------------------------------------------------------------------
// Criterion 9: stratified cross-validation harness.

#[test]
fn criterion_09_crossval_emits_means_variances_and_clean_partitions() {
    let fx = e2e();
    // Partitions: disjoint, exhaustive, and train = complement of test.
    let folds = stratified_kfold(&fx.data.products, 4, 77).unwrap();
    assert_eq!(folds.len(), 4);
    let n = fx.data.products.len();
    let mut seen = vec![false; n];
    for fold in &folds {
        for &i in &fold.test_indices {
            assert!(!seen[i], "product {i} appears in two test folds");
            seen[i] = true;
        }
        let test: BTreeSet<usize> = fold.test_indices.iter().copied().collect();
        let train: BTreeSet<usize> = fold.train_indices.iter().copied().collect();
        assert!(test.is_disjoint(&train), "fold {}: train/test overlap", fold.fold);
        assert_eq!(test.len() + train.len(), n, "fold {}: not exhaustive", fold.fold);
    }
    assert!(seen.iter().all(|&s| s), "some product never lands in a test fold");

    // Hand-checkable fold metrics {1, 0, 0, 0}: echo the gold labels on fold
    // 0, answer a fixed wrong path elsewhere.
    let toy: Vec<Product> = (0..8)
        .map(|i| {
            let class = if i % 2 == 0 { "A > A1" } else { "B > B1" };
            Product::new(i, "title words", CategoryPath::parse(class).unwrap()).unwrap()
        })
        .collect();
    let report = crossval_run(&toy, 4, 5, |fold, _, test| {
        Ok(test
            .iter()
            .map(|p| if fold == 0 { p.class() } else { "Z > Wrong".to_string() })
            .collect())
    })
    .unwrap();
    for (mean, var) in [
        (report.mean_precision, report.var_precision),
        (report.mean_recall, report.var_recall),
        (report.mean_f1, report.var_f1),
    ] {
        assert!((mean - 0.25).abs() < 1e-15, "mean {mean} != 0.25");
        assert!((var - 0.25).abs() < 1e-15, "sample variance {var} != 0.25");
    }

    // The full harness on the synthetic catalog emits finite statistics.
    let cv = crossval_system(&fx.cfg, &fx.data.products, "knn").unwrap();
    assert_eq!(cv.k, 4);
    assert_eq!(cv.folds.len(), 4);
    for (mean, var) in [
        (cv.mean_precision, cv.var_precision),
        (cv.mean_recall, cv.var_recall),
        (cv.mean_f1, cv.var_f1),
    ] {
        assert!(mean.is_finite() && (0.0..=1.0).contains(&mean));
        assert!(var.is_finite() && var >= 0.0);
    }
    println!(
        "[PASS] criterion 9: 4-fold partitions clean; {{1,0,0,0}} gives mean 0.25 / \
         variance 0.25; knn crossval wF {:.4} +/- var {:.5}",
        cv.mean_f1, cv.var_f1
    );
}

// ---------------------------------------------------------------------------
// Criterion 10: data-size sweep.

#[test]
fn criterion_10_shrinking_train_data_degrades_gracefully() {
    let mut cfg = ExperimentConfig::desk_default("acceptance-sweep");
    cfg.seed = 23;
    cfg.data = DataConfig::Synthetic {
        config: SyntheticConfig {
            num_classes: 20,
            depth_min: 2,
            depth_max: 4,
            skew_exponent: 0.8,
            num_products: 600,
            title_noise: 0.2,
            seed: 5,
        },
    };
    // One compact translation model keeps four retrainings affordable; the
    // nearest-neighbor baseline sweeps alongside it.
    cfg.models = vec![ModelSpec {
        architecture: Architecture::RnnAttention,
        embed_dim: 32,
        rnn_hidden: 48,
        ffn_hidden: 64,
        layers: 1,
        attention_heads: 2,
        dropout: 0.1,
        max_source_len: 20,
        max_target_len: 8,
        learning_rate: 2e-3,
    }];
    cfg.train = TrainSpec {
        batch_size: 32,
        max_epochs: 8,
        patience: 8,
        warmup_steps: 50,
        clip_norm: Some(5.0),
    };
    cfg.decode = DecodeSpec {
        strategy: DecodeStrategy::Greedy,
        beam_size: 1,
        ensemble: Vec::new(),
    };
    cfg.validate().unwrap();
    let products = taxpath_core::experiment::load_products(&cfg.data).unwrap();
    let systems = system_names(&cfg);
    assert_eq!(systems, ["rnn_attention", "knn"]);
    let report = sweep_systems(&cfg, &products, &systems).unwrap();
    assert_eq!(
        report.split_labels,
        ["80-10-10", "60-10-30", "40-10-50", "20-10-70"]
    );
    let mut notes = Vec::new();
    for (s, system) in report.systems.iter().enumerate() {
        let full = report.cells[s][0];
        let starved = report.cells[s][3];
        assert!(
            starved <= full + 0.02,
            "{system}: F at 20-10-70 ({starved:.4}) exceeds F at 80-10-10 \
             ({full:.4}) beyond the 2-point slack"
        );
        notes.push(format!("{system} {full:.3} -> {starved:.3}"));
    }
    println!(
        "[PASS] criterion 10: sweep completes over {}; {}",
        report.split_labels.join(" / "),
        notes.join(", ")
    );
}

// ---------------------------------------------------------------------------
// Criterion 11: taxonomy verdicts and novel-path behavior.

#[test]
fn criterion_11_taxonomy_verdicts_and_novel_paths_behave() {
    let gold_paths: Vec<CategoryPath> = [
        "Home > Kitchen > Cookware",
        "Home > Garden",
        "Electronics > Audio > Headphones",
        "Electronics > Video",
    ]
    .iter()
    .map(|s| CategoryPath::parse(s).unwrap())
    .collect();
    let graph = TaxonomyGraph::from_paths(gold_paths.iter());

    // One predicted path per verdict kind, each checked individually.
    let cases = [
        ("Home > Kitchen > Cookware", VerdictKind::Existing),
        ("Electronics > Audio > Cookware", VerdictKind::NovelAccepted),
        ("Home > Stereo", VerdictKind::RejectedUnknownNode),
        ("Cookware > Home", VerdictKind::RejectedCycle),
        ("Home > Home", VerdictKind::RejectedMalformed),
    ];
    for (text, expected) in &cases {
        let verdict = graph.classify_path(&CategoryPath::parse(text).unwrap());
        assert_eq!(
            verdict.kind, *expected,
            "path {text:?} classified as {} instead of {}",
            verdict.kind, expected
        );
    }

    // Shape fractions against hand counts: of the two novel paths below, one
    // starts at a top-level node and both end on gold leaves.
    let predictions: Vec<CategoryPath> = [
        "Home > Kitchen > Cookware",
        "Home > Garden",
        "Electronics > Video",
        "Electronics > Audio > Cookware",
        "Kitchen > Garden",
        "Home > Stereo",
        "Cookware > Home",
        "Home > Home",
    ]
    .iter()
    .map(|s| CategoryPath::parse(s).unwrap())
    .collect();
    let (classified, merged) = graph.classify_and_apply(predictions.iter());
    let shape = path_shape_report(&classified, &graph);
    assert_eq!(shape.count_existing, 3);
    assert_eq!(shape.count_novel, 2);
    assert_eq!(shape.count_rejected_unknown_node, 1);
    assert_eq!(shape.count_rejected_cycle, 1);
    assert_eq!(shape.count_rejected_malformed, 1);
    assert_eq!(shape.fraction_top_first, 0.5);
    assert_eq!(shape.fraction_leaf_last, 1.0);

    // The merged graph gained the two novel edges and still orders
    // topologically: every edge must point forward in the order.
    assert_eq!(merged.edge_count(), graph.edge_count() + 2);
    assert!(merged.contains_edge("Audio", "Cookware"));
    assert!(merged.contains_edge("Kitchen", "Garden"));
    assert!(!merged.is_forest(), "two-parent nodes make the result a DAG, not a tree");
    let order = merged.topo_order().expect("merged graph stays acyclic");
    let position: HashMap<&str, usize> = order
        .iter()
        .enumerate()
        .map(|(i, label)| (label.as_str(), i))
        .collect();
    for (parent, child, _) in merged.edges() {
        assert!(
            position[parent] < position[child],
            "edge {parent} -> {child} violates the topological order"
        );
    }

    // On the end-to-end run the nearest-neighbor baseline can only repeat
    // training paths, while the translation systems compose novel ones.
    let fx = e2e();
    let knn_analysis = analyze_predicted_paths(&fx.data.products, fx.rows("knn"));
    assert_eq!(
        knn_analysis.shape.count_novel, 0,
        "nearest-neighbor predictions must never form novel paths"
    );
    assert_eq!(knn_analysis.unparseable, 0);
    let mut novel_total = 0usize;
    let mut per_system = Vec::new();
    for system in ["rnn_attention", "transformer", "ensemble"] {
        let analysis = analyze_predicted_paths(&fx.data.products, fx.rows(system));
        novel_total += analysis.shape.count_novel;
        per_system.push(format!("{system} {}", analysis.shape.count_novel));
    }
    assert!(
        novel_total > 0,
        "translation systems produced no novel paths on the synthetic run"
    );
    println!(
        "[PASS] criterion 11: five verdict kinds verified, merged DAG orders \
         topologically, knn novel paths 0, translation novel paths: {}",
        per_system.join(", ")
    );
}
