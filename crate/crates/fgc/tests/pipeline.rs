//! Cross-module integration: a small end-to-end run exercising training,
//! evaluation, analysis and the log contents together.

use fgc::analyze::{analyze, AnalysisOptions};
use fgc::config::RunConfig;
use fgc::train::train;

fn small_config(seed: u64) -> RunConfig {
    let cfg: RunConfig = toml::from_str(&format!(
        r#"
        epochs = 12
        batch_size = 16
        seed = {seed}
        k = 6
        eta = 0.003
        rho = 0.002

        [network]
        input_channels = 1
        input_size = 8
        classes = 3

        [[network.layers]]
        type = "conv"
        channels = 6
        kernel = 4
        stride = 2
        padding = 1
        gated = true

        [[network.layers]]
        type = "conv"
        channels = 8
        kernel = 3
        gated = true
        fgc = true

        [optimizer]
        lr = 0.05
        milestones = [8]

        [dataset]
        kind = "synth"
        classes = 3
        train_per_class = 40
        test_per_class = 15
        image_size = 8
        noise_sigma = 0.3
        seed = 77
        "#
    ))
    .unwrap();
    cfg.validate().unwrap();
    cfg
}

#[test]
fn toy_run_trains_and_reports_consistently() {
    let (trainer, log) = train(small_config(5)).unwrap();
    assert_eq!(log.len(), 12);

    // The classifier learns the toy task.
    let last = log.last().unwrap();
    assert!(
        last.eval_error < 0.2,
        "toy task should be mostly solved, eval error {}",
        last.eval_error
    );

    // Evaluating the training set with hard gates lands close to the
    // train-mode error (within five points).
    let train_eval = trainer.evaluate(&trainer.train_data, "train", false).unwrap();
    assert!(
        train_eval.error < last.train_error + 0.05,
        "hard-gate train error {} vs train-mode error {}",
        train_eval.error,
        last.train_error
    );

    // Log records carry per-layer losses for the gated/coupled layers.
    assert!(last.l0.contains_key(&0) && last.l0.contains_key(&1));
    assert!(last.contrastive.contains_key(&1));
    assert!(!last.contrastive.contains_key(&0));

    // MI bound readings stay under ln N.
    let cap = (trainer.train_data.len() as f64).ln() + 1e-12;
    for record in &log {
        for v in record.mi_bound_per_pair.values() {
            assert!(*v <= cap);
        }
    }

    // Analysis produces the NMI triplet for the coupled layer and writes
    // the report files.
    let dir = std::env::temp_dir().join("fgc_pipeline_analysis");
    let _ = std::fs::remove_dir_all(&dir);
    let bundle = analyze(
        &trainer,
        &trainer.test_data,
        AnalysisOptions { queries: 4 },
        Some(&dir),
    )
    .unwrap();
    let triplet = &bundle.summary.nmi[&1];
    for v in [triplet.feature_label, triplet.gate_label, triplet.feature_gate] {
        assert!((0.0..=1.0).contains(&v));
    }
    assert!(dir.join("frequencies.csv").exists());
    assert!(dir.join("gate_ranking.csv").exists());

    // Execution frequencies are genuine frequencies.
    let eval = trainer.evaluate_test(false).unwrap();
    for rows in eval.report.frequencies.values() {
        for row in rows {
            for &f in row {
                assert!((0.0..=1.0).contains(&f));
            }
        }
    }

    // And the frequency of an (instance-averaged) channel matches a direct
    // recount from the hard masks.
    let sweep = trainer.sweep(&trainer.test_data, false).unwrap();
    let masks = &sweep.activity.masks[&1];
    let labels = trainer.test_data.labels();
    let freq = &eval.report.frequencies[&1];
    for class in 0..3 {
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        for ch in 0..8 {
            let count = members.iter().filter(|&&i| masks[i][ch]).count();
            let expect = count as f64 / members.len() as f64;
            assert!((freq[ch][class] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn gate_ranking_places_each_query_first() {
    let (trainer, _) = train(small_config(9)).unwrap();
    let sweep = trainer.sweep(&trainer.test_data, false).unwrap();
    let rows = &sweep.open_probs[&1];
    for query in 0..4 {
        let ranked = fgc::analyze::gate_similarity_ranking(rows, query);
        assert_eq!(ranked[0].0, query);
    }
}

/// Hand-rolled convolution that physically skips closed input channels,
/// accumulating surviving terms in the same (channel, row, col) order as
/// the library kernel.
#[allow(clippy::too_many_arguments)]
fn conv_skipping_closed(
    x: &[f64],
    masks: &[Vec<bool>],
    w: &[f64],
    n: usize,
    c: usize,
    h: usize,
    k: usize,
    r: usize,
    stride: usize,
    padding: usize,
) -> Vec<f64> {
    let oh = (h + 2 * padding - r) / stride + 1;
    let mut out = vec![0.0; n * k * oh * oh];
    for ni in 0..n {
        for ko in 0..k {
            for y in 0..oh {
                for xo in 0..oh {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        if !masks[ni][ci] {
                            continue; // closed channel: never computed
                        }
                        for ry in 0..r {
                            let iy = (y * stride + ry) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for rx in 0..r {
                                let ix = (xo * stride + rx) as isize - padding as isize;
                                if ix < 0 || ix >= h as isize {
                                    continue;
                                }
                                acc += x[((ni * c + ci) * h + iy as usize) * h + ix as usize]
                                    * w[((ko * c + ci) * r + ry) * r + rx];
                            }
                        }
                    }
                    out[((ni * k + ko) * oh + y) * oh + xo] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn closed_channels_can_be_skipped_bit_exactly() {
    use fgc::rng::Rng;
    use fgc::tensor::{ops, Tape, Tensor};

    let mut rng = Rng::seed_from(33);
    let (n, c, h, k, r) = (3usize, 4usize, 6usize, 5usize, 3usize);
    let feature: Vec<f64> = (0..n * c * h * h).map(|_| rng.normal()).collect();
    let weight: Vec<f64> = (0..k * c * r * r).map(|_| rng.normal() * 0.3).collect();
    // Per-instance hard gates with several closed channels.
    let masks: Vec<Vec<bool>> = (0..n)
        .map(|_| (0..c).map(|_| rng.uniform() < 0.6).collect())
        .collect();
    let gate_data: Vec<f64> = masks
        .iter()
        .flat_map(|row| row.iter().map(|&b| if b { 1.0 } else { 0.0 }))
        .collect();

    let tape = Tape::inference();
    let x = Tensor::new(&[n, c, h, h], feature.clone()).unwrap();
    let gate = Tensor::new(&[n, c], gate_data).unwrap();
    let w = Tensor::new(&[k, c, r, r], weight.clone()).unwrap();

    // Full path: gate the feature map, then convolve everything.
    let gated = ops::channel_mul(&tape, &gate, &x).unwrap();
    let full = ops::conv2d(&tape, &gated, &w, 1, 1).unwrap();

    // Skip path: never touch closed channels.
    let skipped = conv_skipping_closed(&gated.to_vec(), &masks, &weight, n, c, h, k, r, 1, 1);

    let full = full.to_vec();
    assert_eq!(full.len(), skipped.len());
    for (a, b) in full.iter().zip(&skipped) {
        assert_eq!(a.to_bits(), b.to_bits(), "skip path diverged");
    }

    // And downstream logits, fed bit-identical activations, stay identical.
    let head_w = Tensor::new(&[2, k], (0..2 * k).map(|i| (i as f64).sin()).collect()).unwrap();
    let head_b = Tensor::new(&[2], vec![0.0; 2]).unwrap();
    let via_full = {
        let pooled = ops::global_avg_pool(&tape, &Tensor::new(&[n, k, h, h], full).unwrap()).unwrap();
        ops::linear(&tape, &pooled, &head_w, &head_b).unwrap().to_vec()
    };
    let via_skip = {
        let pooled = ops::global_avg_pool(&tape, &Tensor::new(&[n, k, h, h], skipped).unwrap()).unwrap();
        ops::linear(&tape, &pooled, &head_w, &head_b).unwrap().to_vec()
    };
    assert!(via_full.iter().zip(&via_skip).all(|(a, b)| a.to_bits() == b.to_bits()));
}
