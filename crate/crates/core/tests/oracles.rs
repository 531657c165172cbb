mod common;

use bevcollab::cda::{assemble_tokens, assemble_weights, stack_tokens, TokenMatrix};
use bevcollab::detect::AnchorLabel;
use bevcollab::geometry::{rotated_iou, OrientedBox};
use bevcollab::nn::Dense;
use bevcollab::objective::{depth_loss, detection_loss, dice_loss, focal_dice, focal_loss, uac_loss, LossWeights, UacLevelInputs};
use bevcollab::uac::{agent_token, refine_tokens, select_tokens, token_count, UacLevel};
use common::*;
use rand::Rng;

#[test]
fn top_k_matches_full_sort() {
    let mut r = rng(1);
    for trial in 0..200 {
        let (h, w) = (r.random_range(1..12), r.random_range(1..12));
        // coarse values force ties
        let weights: Vec<f64> = (0..h * w).map(|_| (r.random_range(0..6) as f64) / 5.0).collect();
        let ratio = [0.25, 0.5, 0.6, 0.75, 1.0, r.random_range(0.01..1.0)][trial % 6];
        let sel = select_tokens(&weights, h, w, ratio, 0).unwrap();
        let want = topk_by_sort(&weights, token_count(ratio, h * w));
        let got: Vec<usize> = sel.indices.iter().map(|(r, c)| r * w + c).collect();
        assert_eq!(got, want, "trial {trial}");
    }
}

#[test]
fn assemble_matches_two_loop_softmax() {
    let mut r = rng(2);
    for _ in 0..50 {
        let m = r.random_range(1..20);
        let c = r.random_range(1..24);
        let rows: Vec<Vec<f32>> = (0..m).map(|_| (0..c).map(|_| r.random_range(-2.0f32..2.0)).collect()).collect();
        let prior: Vec<f64> = (0..m).map(|_| r.random_range(1e-3..1.0)).collect();
        let tm = TokenMatrix::new(c, rows.concat(), prior.clone()).unwrap();
        let (want_w, want_x) = assemble_dense(&rows, &prior);
        let got_w = assemble_weights(&tm);
        let got_x = assemble_tokens(&tm);
        for a in 0..m {
            assert!(max_abs_diff(&got_w[a], &want_w[a]) <= 1e-5);
            assert!(max_abs_diff(&widen(got_x.row(a)), &want_x[a]) <= 1e-5);
        }
    }
}

#[test]
fn uniform_prior_is_plain_softmax() {
    let rows = vec![vec![0.3f32, -1.0], vec![2.0, 0.5], vec![-0.7, 0.1]];
    let tm = stack_tokens(&rows, &[0.5, 0.5, 0.5], None, 2).unwrap();
    let ones = stack_tokens(&rows, &[1.0, 1.0, 1.0], None, 2).unwrap();
    assert_eq!(assemble_weights(&tm), assemble_weights(&ones));
    let (want, _) = assemble_dense(&rows, &[1.0, 1.0, 1.0]);
    for (g, w) in assemble_weights(&tm).iter().zip(&want) {
        assert!(max_abs_diff(g, w) <= 1e-6);
    }
}

#[test]
fn rotated_iou_matches_monte_carlo() {
    let mut r = rng(3);
    let mut mc = rng(33);
    for _ in 0..40 {
        let a = random_box(&mut r);
        let b = random_box(&mut r);
        let est = iou_monte_carlo(&a, &b, 200_000, &mut mc);
        let got = rotated_iou(&a, &b);
        assert!((got - est).abs() <= 1e-2, "{a:?} {b:?}: {got} vs {est}");
    }
}

#[test]
fn rotated_iou_known_cases() {
    let a = OrientedBox::new(0.0, 0.0, 2.0, 2.0, 0.0);
    assert_eq!(rotated_iou(&a, &a), 1.0);
    // half overlap of unit-height strips: 2/6
    let b = OrientedBox::new(1.0, 0.0, 2.0, 2.0, 0.0);
    assert!((rotated_iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
    let far = OrientedBox::new(10.0, 0.0, 2.0, 2.0, 0.3);
    assert_eq!(rotated_iou(&a, &far), 0.0);
    // a square rotated by 90 degrees is the same square
    let turned = OrientedBox::new(0.0, 0.0, 2.0, 2.0, std::f64::consts::FRAC_PI_2);
    assert!((rotated_iou(&a, &turned) - 1.0).abs() < 1e-12);
}

fn random_level(r: &mut impl Rng, c: usize, points: usize, offset_scale: f32) -> UacLevel {
    let mut level = UacLevel::seeded(c, points, r);
    level.refine_offset_net = Dense::random(c, 2 * points, offset_scale, r);
    level
}

fn random_selection(r: &mut impl Rng, h: usize, w: usize, ratio: f64) -> bevcollab::uac::TokenSelection {
    let weights: Vec<f64> = (0..h * w).map(|_| r.random()).collect();
    select_tokens(&weights, h, w, ratio, 0).unwrap()
}

#[test]
fn refine_matches_dense_gather() {
    let mut r = rng(4);
    for trial in 0..30 {
        let (h, w, c) = (r.random_range(2..10), r.random_range(2..10), r.random_range(1..12));
        let feat = random_grid(&mut r, h, w, c);
        let points = r.random_range(1..5);
        let level = random_level(&mut r, c, points, 8.0);
        let sel = random_selection(&mut r, h, w, [0.25, 0.5, 1.0][trial % 3]);
        let got = refine_tokens(&feat, &sel, &level).unwrap();
        let want = refine_dense(&feat, &sel.indices, &level.refine_offset_net, &level.refine_weights);
        for (g, wv) in got.iter().zip(&want) {
            assert!(max_abs_diff(&widen(g), wv) <= 1e-5);
        }
    }
}

#[test]
fn refine_zero_weights_is_identity() {
    let mut r = rng(5);
    let feat = random_grid(&mut r, 6, 5, 4);
    let mut level = random_level(&mut r, 4, 3, 1.0);
    level.refine_weights = vec![0.0; 3];
    let sel = random_selection(&mut r, 6, 5, 0.5);
    for (t, &(row, col)) in refine_tokens(&feat, &sel, &level).unwrap().iter().zip(&sel.indices) {
        assert_eq!(t.as_slice(), feat.at(row, col));
    }
}

#[test]
fn refine_constant_field_doubles() {
    let mut r = rng(6);
    let feat = bevcollab::grid::BevGrid::filled(bevcollab::grid::GridSpec::centered(8, 8, 1.0), 3, 0.75);
    let mut level = random_level(&mut r, 3, 4, 0.3);
    level.refine_weights = vec![0.25; 4];
    // keep every sample inside the hull
    let sel = bevcollab::uac::TokenSelection {
        level: 0,
        ratio: 1.0,
        height: 8,
        width: 8,
        indices: vec![(3, 3), (4, 4), (4, 3)],
    };
    for t in refine_tokens(&feat, &sel, &level).unwrap() {
        for v in t {
            assert!((v - 1.5).abs() < 1e-6);
        }
    }
}

#[test]
fn agent_token_matches_dense_attention() {
    let mut r = rng(7);
    for trial in 0..30 {
        let (h, w, c) = (r.random_range(1..9), r.random_range(1..9), r.random_range(1..12));
        let feat = random_grid(&mut r, h, w, c);
        let level = random_level(&mut r, c, 2, 1.0);
        let sel = random_selection(&mut r, h, w, [0.25, 0.5, 0.75, 1.0][trial % 4]);
        let got = agent_token(&feat, &sel, &level).unwrap();
        let want = agent_token_dense(&feat, &sel.indices, &level.agent_token, &level.w_query, &level.w_key, &level.w_value);
        assert!(max_abs_diff(&widen(&got), &want) <= 1e-5, "trial {trial}");
    }
}

#[test]
fn agent_token_of_identical_residuals_is_that_value() {
    let mut r = rng(8);
    let feat = bevcollab::grid::BevGrid::filled(bevcollab::grid::GridSpec::centered(4, 4, 1.0), 3, -0.4);
    let mut level = random_level(&mut r, 3, 2, 1.0);
    level.w_value = Dense::identity(3, 3, 1.0);
    let sel = random_selection(&mut r, 4, 4, 0.25);
    for v in agent_token(&feat, &sel, &level).unwrap() {
        assert!((v + 0.4).abs() < 1e-6);
    }
    let all = random_selection(&mut r, 4, 4, 1.0);
    assert_eq!(agent_token(&feat, &all, &level).unwrap(), vec![0.0; 3]);
}

fn grid4(r: &mut impl Rng) -> (Vec<f64>, Vec<f64>) {
    let p: Vec<f64> = unit_vec(r, 16);
    let q: Vec<f64> = (0..16).map(|_| if r.random_bool(0.4) { 1.0 } else { 0.0 }).collect();
    (p, q)
}

#[test]
fn focal_and_dice_match_references() {
    let mut r = rng(9);
    let weights = LossWeights::default();
    for _ in 0..100 {
        let (p, q) = grid4(&mut r);
        for i in 0..16 {
            let got = focal_loss(p[i].clamp(1e-6, 1.0 - 1e-6), q[i] == 1.0, 0.25, 2.0).unwrap();
            assert!((got - focal_ref(p[i].clamp(1e-6, 1.0 - 1e-6), q[i] == 1.0, 0.25, 2.0)).abs() <= 1e-6);
        }
        assert!((dice_loss(&p, &q).unwrap() - dice_ref(&p, &q)).abs() <= 1e-6);
        assert!((focal_dice(&p, &q, &weights).unwrap() - focal_dice_ref(&p, &q)).abs() <= 1e-6);
    }
}

#[test]
fn focal_known_values() {
    // positive, p = 0.5: 0.25 · 0.25 · ln 2
    let want = 0.25 * 0.25 * std::f64::consts::LN_2;
    assert!((focal_loss(0.5, true, 0.25, 2.0).unwrap() - want).abs() < 1e-15);
    assert!(focal_loss(0.0, true, 0.25, 2.0).is_err());
    assert!(focal_loss(1.0, false, 0.25, 2.0).is_err());
    // perfect overlap of a single cell: 1 - 2/(1+1+1)
    assert!((dice_loss(&[1.0], &[1.0]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn detection_loss_matches_reference() {
    let mut r = rng(10);
    let weights = LossWeights::default();
    for _ in 0..100 {
        let cls = unit_vec(&mut r, 16);
        let dir = unit_vec(&mut r, 16);
        let target: Vec<usize> = (0..16).map(|_| r.random_range(0..2)).collect();
        let labels: Vec<AnchorLabel> = (0..16)
            .map(|_| [AnchorLabel::Positive, AnchorLabel::Negative, AnchorLabel::Ignored][r.random_range(0..3)])
            .collect();
        let got = detection_loss(&cls, &dir, &target, &labels, &weights).unwrap();

        let (mut c_sum, mut c_n, mut d_sum, mut d_n) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..16 {
            match labels[i] {
                AnchorLabel::Positive => {
                    c_sum += focal_ref(cls[i], true, 0.25, 2.0);
                    c_n += 1.0;
                    d_sum += bce_ref(dir[i], target[i] == 1);
                    d_n += 1.0;
                }
                AnchorLabel::Negative => {
                    c_sum += focal_ref(cls[i], false, 0.25, 2.0);
                    c_n += 1.0;
                }
                AnchorLabel::Ignored => {}
            }
        }
        let cls_ref = if c_n > 0.0 { c_sum / c_n } else { 0.0 };
        let dir_ref = if d_n > 0.0 { d_sum / d_n } else { 0.0 };
        assert!((got.cls - cls_ref).abs() <= 1e-6);
        assert!((got.dir - dir_ref).abs() <= 1e-6);
        assert!((got.total - (cls_ref + 2.0 * 0.0 + 0.2 * dir_ref)).abs() <= 1e-6);
    }
}

#[test]
fn depth_loss_matches_reference() {
    let mut r = rng(11);
    let weights = LossWeights::default();
    for _ in 0..100 {
        let logits: Vec<f64> = (0..16).map(|_| r.random_range(-3.0..3.0)).collect();
        let labels: Vec<Option<usize>> = (0..4).map(|_| r.random_bool(0.7).then(|| r.random_range(0..4))).collect();
        let got = depth_loss(&logits, 4, &labels, &weights).unwrap();
        assert!((got - depth_ref(&logits, 4, &labels)).abs() <= 1e-6);
    }
}

#[test]
fn uac_loss_matches_reference() {
    let mut r = rng(12);
    let weights = LossWeights::default();
    for _ in 0..50 {
        let levels = r.random_range(1..4);
        let neighbors = r.random_range(0..3);
        let mut data = Vec::new();
        for _ in 0..levels {
            let local: Vec<(Vec<f64>, Vec<f64>)> = (0..=neighbors).map(|_| grid4(&mut r)).collect();
            let aligned: Vec<(Vec<f64>, Vec<f64>)> = (0..=neighbors).map(|_| (unit_vec(&mut r, 16), unit_vec(&mut r, 16))).collect();
            let consensus: Vec<Vec<f64>> = (0..neighbors).map(|_| unit_vec(&mut r, 16)).collect();
            let occ = grid4(&mut r).1;
            data.push((local, aligned, consensus, occ));
        }

        let mut want = 0.0;
        for (local, aligned, consensus, occ) in &data {
            let mut s = 0.0;
            for (p, q) in local {
                s += focal_dice_ref(p, q);
            }
            s /= local.len() as f64;
            let mut collab = vec![0.0; 16];
            for (conf, dem) in aligned {
                for i in 0..16 {
                    collab[i] += dem[i] * conf[i];
                }
            }
            let c = focal_dice_ref(&collab, occ);
            let mut g = 0.0;
            for m in consensus {
                g += focal_dice_ref(m, occ);
            }
            if !consensus.is_empty() {
                g /= consensus.len() as f64;
            }
            want += (s + c + 0.1 * g) / levels as f64;
        }

        let borrowed: Vec<_> = data
            .iter()
            .map(|(l, a, c, _)| {
                let l: Vec<(&[f64], &[f64])> = l.iter().map(|(x, y)| (x.as_slice(), y.as_slice())).collect();
                let a: Vec<(&[f64], &[f64])> = a.iter().map(|(x, y)| (x.as_slice(), y.as_slice())).collect();
                let c: Vec<&[f64]> = c.iter().map(|x| x.as_slice()).collect();
                (l, a, c)
            })
            .collect();
        let inputs: Vec<UacLevelInputs<'_>> = borrowed
            .iter()
            .zip(&data)
            .map(|((l, a, c), d)| UacLevelInputs {
                local: l,
                aligned: a,
                consensus: c,
                ego_occupancy: &d.3,
            })
            .collect();
        let got = uac_loss(&inputs, &weights).unwrap();
        assert!((got.total - want).abs() <= 1e-6, "{} vs {want}", got.total);
    }
}
