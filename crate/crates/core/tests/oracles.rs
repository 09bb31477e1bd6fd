//! Fast paths against brute-force references: the four segmentation metrics
//! on random small maps, the gamma-family kernels against a high-precision
//! table, and the convolution against a direct loop.

mod support;

use evseg::labels::LabelMap;
use evseg::metrics;
use evseg::special;
use evseg::tape::Tape;
use evseg::tensor::Tensor;
use rand::Rng;

#[test]
fn metric_fast_paths_match_the_brute_force_oracles() {
    let mut rng = support::rng(71);
    let thresholds: Vec<f64> = (1..100).map(|i| f64::from(i) / 100.0).collect();
    for round in 0..50 {
        let (h, w) = (12, 12);
        let k = 2 + round % 3;
        let pred = support::random_label_map(&mut rng, h, w, k);
        let truth = support::random_label_map(&mut rng, h, w, k);
        let prob = support::random_prob_map(&mut rng, k, h, w);
        let unc_data: Vec<f64> = (0..h * w).map(|_| rng.random::<f64>()).collect();
        let unc = Tensor::new(vec![h, w], unc_data).unwrap();

        let fast_dice = metrics::dice_scores(&pred, &truth, k).unwrap();
        let slow_dice = support::dice_oracle(&pred, &truth, k);
        for (f, s) in fast_dice.iter().zip(&slow_dice) {
            assert!((f - s).abs() <= 1e-9, "dice {f} vs {s} in round {round}");
        }

        let cap = metrics::image_diagonal(h, w);
        for class in 0..k as u8 {
            let fast = metrics::assd(&pred, &truth, class, cap).unwrap();
            let slow = support::assd_oracle(&pred, &truth, class, cap);
            assert!(
                (fast - slow).abs() <= 1e-9,
                "assd class {class}: {fast} vs {slow} in round {round}"
            );
        }

        for bins in [7, 10] {
            let fast = metrics::ece(&prob, &truth, bins).unwrap();
            let slow = support::ece_oracle(&prob, &truth, bins);
            assert!(
                (fast - slow).abs() <= 1e-9,
                "ece bins {bins}: {fast} vs {slow} in round {round}"
            );
        }

        let fast = metrics::ueo(&unc, &pred, &truth, &thresholds).unwrap();
        let slow = support::ueo_oracle(&unc, &pred, &truth, &thresholds);
        assert!((fast - slow).abs() <= 1e-9, "ueo {fast} vs {slow} in round {round}");
    }
}

#[test]
fn gamma_kernels_match_the_reference_table() {
    // tools/derive_expected.py --emit-gamma-grid regenerates this table with
    // 50-digit arithmetic.
    let table = include_str!("data/gamma_refs.csv");
    let mut rows = 0usize;
    for line in table.lines() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let cells: Vec<f64> = line
            .split(',')
            .map(|c| c.trim().parse().expect("numeric cell"))
            .collect();
        assert_eq!(cells.len(), 4, "x, digamma, log_gamma, trigamma");
        let (x, dig, lg, trig) = (cells[0], cells[1], cells[2], cells[3]);

        let tol = |reference: f64| 1e-10f64.max(1e-12 * reference.abs());
        let got_dig = special::digamma(x).unwrap();
        let got_lg = special::log_gamma(x).unwrap();
        let got_trig = special::trigamma(x).unwrap();
        assert!(
            (got_dig - dig).abs() <= tol(dig),
            "digamma({x}): {got_dig} vs {dig}"
        );
        assert!((got_lg - lg).abs() <= tol(lg), "log_gamma({x}): {got_lg} vs {lg}");
        assert!(
            (got_trig - trig).abs() <= tol(trig),
            "trigamma({x}): {got_trig} vs {trig}"
        );
        rows += 1;
    }
    assert_eq!(rows, 100, "reference grid size");
}

/// Direct convolution: every output element by its full reduction loop.
fn conv_oracle(
    input: &[f64],
    kernel: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    (f, kh, kw): (usize, usize, usize),
    stride: usize,
    padding: usize,
) -> Vec<f64> {
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;
    let mut out = vec![0.0; n * f * oh * ow];
    for bi in 0..n {
        for fi in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as i64 - padding as i64;
                                let ix = (ox * stride + kx) as i64 - padding as i64;
                                if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                                    continue;
                                }
                                let iv = input
                                    [((bi * c + ci) * h + iy as usize) * w + ix as usize];
                                let kv = kernel[((fi * c + ci) * kh + ky) * kw + kx];
                                acc += iv * kv;
                            }
                        }
                    }
                    out[((bi * f + fi) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn convolution_matches_the_direct_loop() {
    let mut rng = support::rng(99);
    let cases = [
        ((1, 2, 5, 5), (3, 3, 3), 1, 0),
        ((1, 2, 5, 5), (3, 3, 3), 1, 1),
        ((2, 3, 8, 6), (4, 3, 3), 1, 1),
        ((1, 4, 9, 9), (2, 3, 3), 2, 1),
        ((2, 1, 7, 7), (3, 5, 5), 1, 2),
        ((1, 3, 6, 6), (5, 1, 1), 1, 0),
    ];
    for &((n, c, h, w), (f, kh, kw), stride, padding) in &cases {
        let input: Vec<f64> = (0..n * c * h * w).map(|_| rng.random::<f64>() - 0.5).collect();
        let kernel: Vec<f64> = (0..f * c * kh * kw).map(|_| rng.random::<f64>() - 0.5).collect();

        let tape = Tape::new();
        let iv = tape
            .constant(Tensor::new(vec![n, c, h, w], input.clone()).unwrap())
            .unwrap();
        let kv = tape
            .constant(Tensor::new(vec![f, c, kh, kw], kernel.clone()).unwrap())
            .unwrap();
        let out = tape.conv2d(iv, kv, stride, padding).unwrap();
        let fast = tape.value(out);
        let slow = conv_oracle(&input, &kernel, (n, c, h, w), (f, kh, kw), stride, padding);

        assert_eq!(fast.data().len(), slow.len());
        for (i, (a, b)) in fast.data().iter().zip(&slow).enumerate() {
            assert!(
                (a - b).abs() <= 1e-12,
                "stride {stride} pad {padding} element {i}: {a} vs {b}"
            );
        }
    }
}
