use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRng, TestRunner};
use rbfood::objective::{boundary_loss, in_dist_loss};
use rbfood::pipeline::{build_accumulator, compose_uncertainty, rank_and_filter, ProposalMap, RankedProposal};
use rbfood::propcls::{classify_scores, mask_pool, BACKGROUND_LABEL};
use rbfood::propseg::{binary_object_mask, SegOutput};
use rbfood::rbf::{argmax, RbfHead};
use rbfood::synthbench::{
    build_dataset, extract_boundary_pixels, feature_recipe, is_background, is_unknown, BBox, BenchParams, PixelLabel,
    Proposal, Split, LABEL_SIZE, NUM_CLASSES,
};
use rbfood::tensor::Tensor;

pub type Check = Result<(), String>;

/// Runs `test` on `cases` deterministic draws from `strategy`.
fn check<S: Strategy>(cases: u32, strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Check {
    let config = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    let rng = TestRng::deterministic_rng(config.rng_algorithm);
    TestRunner::new_with_rng(config, rng)
        .run(&strategy, test)
        .map_err(|e| e.to_string())
}

const CASES: u32 = 256;

fn vector(d: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(lo..hi, d)
}

/// Head with `[C, K, D]` centers and a feature of width `D`.
fn head_and_feature() -> impl Strategy<Value = (RbfHead, Vec<f64>)> {
    (1usize..5, 1usize..4, 1usize..7, 0.1f64..2.0, any::<u64>()).prop_flat_map(|(c, k, d, sigma, seed)| {
        let head = RbfHead::new(c, k, d, sigma, seed).unwrap();
        (Just(head), vector(d, -0.5, 0.5))
    })
}

fn shifted(head: &RbfHead, v: &[f64]) -> RbfHead {
    let mut out = head.clone();
    for (i, m) in out.centers.data_mut().iter_mut().enumerate() {
        *m += v[i % v.len()];
    }
    out
}

fn dummy_proposal(bbox: BBox) -> Proposal {
    Proposal {
        bbox,
        features: Tensor::zeros(&[1, 1, 1]),
        classes: Vec::new(),
        boundary: Vec::new(),
        ignore: Vec::new(),
        gt_class: None,
    }
}

fn bbox() -> impl Strategy<Value = BBox> {
    (0.0f64..50.0, 0.0f64..50.0, 1.0f64..30.0, 1.0f64..30.0).prop_map(|(x, y, w, h)| BBox::new(x, y, w, h))
}

fn brute_boundary(labels: &[u8], size: usize, radius: usize) -> Vec<bool> {
    let mut out = vec![false; size * size];
    for y in 0..size {
        for x in 0..size {
            let (mut obj, mut bg) = (false, false);
            for ny in 0..size {
                for nx in 0..size {
                    if nx.abs_diff(x) <= radius && ny.abs_diff(y) <= radius {
                        if is_background(labels[ny * size + nx]) {
                            bg = true;
                        } else {
                            obj = true;
                        }
                    }
                }
            }
            out[y * size + x] = obj && bg;
        }
    }
    out
}

/// Label map painted with a few random rectangles so that transitions occur.
fn label_map() -> impl Strategy<Value = Vec<u8>> {
    (
        0u8..3,
        prop::collection::vec(
            (0usize..28, 0usize..28, 1usize..14, 1usize..14, 0u8..NUM_CLASSES as u8),
            0..5,
        ),
    )
        .prop_map(|(base, rects)| {
            let mut m = vec![base; LABEL_SIZE * LABEL_SIZE];
            for (x, y, w, h, c) in rects {
                for yy in y..(y + h).min(LABEL_SIZE) {
                    for xx in x..(x + w).min(LABEL_SIZE) {
                        m[yy * LABEL_SIZE + xx] = c;
                    }
                }
            }
            m
        })
}

fn seg_output() -> impl Strategy<Value = SegOutput> {
    let classes: Vec<u8> = vec![0, 1, 2, 3, 4, 5];
    let cells = LABEL_SIZE * LABEL_SIZE;
    vector(cells * classes.len(), 0.0, 1.0).prop_map(move |h_maps| SegOutput {
        class_map: vec![0; cells],
        u_seg: vec![0.0; cells],
        h_maps,
        classes: classes.clone(),
        features: Vec::new(),
    })
}

pub fn kernel_scores_are_bounded() -> Check {
    check(CASES, head_and_feature(), |(head, f)| {
        let s = head.scores(&f).unwrap();
        for &h in &s.h {
            prop_assert!(h > 0.0 && h <= 1.0, "h = {h}");
        }
        prop_assert!(s.tau >= 0.0 && s.tau < 1.0);
        prop_assert_eq!(s.tau, 1.0 - s.h[s.predicted_class]);
        prop_assert_eq!(s.predicted_class, argmax(&s.h).0);
        Ok(())
    })
}

pub fn translation_equivariance() -> Check {
    check(CASES, (head_and_feature(), vector(8, -2.0, 2.0)), |((head, f), v)| {
        let d = f.len();
        let v = &v[..d];
        let moved: Vec<f64> = f.iter().zip(v).map(|(a, b)| a + b).collect();
        let a = head.scores(&f).unwrap().h;
        let b = shifted(&head, v).scores(&moved).unwrap().h;
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-9 * x.max(1e-300), "{x} vs {y}");
        }
        Ok(())
    })
}

pub fn single_center_decays_radially() -> Check {
    check(
        CASES,
        (
            1usize..6,
            any::<u64>(),
            vector(6, -1.0, 1.0),
            0.0f64..0.3,
            0.001f64..0.3,
        ),
        |(d, seed, dir, t1, dt)| {
            let head = RbfHead::new(1, 1, d, 0.1, seed).unwrap();
            let dir = &dir[..d];
            let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assume!(norm > 1e-3);
            let at = |t: f64| -> Vec<f64> {
                head.center(0, 0)
                    .iter()
                    .zip(dir)
                    .map(|(m, u)| m + t * u / norm)
                    .collect()
            };
            let near = head.scores(&at(t1)).unwrap();
            let far = head.scores(&at(t1 + dt)).unwrap();
            prop_assert!(far.h[0] < near.h[0]);
            prop_assert!(far.tau > near.tau);
            Ok(())
        },
    )
}

pub fn ema_fixed_point() -> Check {
    check(
        CASES,
        (
            1usize..4,
            1usize..6,
            any::<u64>(),
            prop::collection::vec(vector(6, -1.0, 1.0), 1..4),
            0.0f64..=1.0,
        ),
        |(c, d, seed, deltas, momentum)| {
            let mut head = RbfHead::new(c, 1, d, 0.1, seed).unwrap();
            let before = head.centers.clone();
            let (mut features, mut labels) = (Vec::new(), Vec::new());
            for class in 0..c {
                for delta in &deltas {
                    for sign in [1.0, -1.0] {
                        features.extend(head.center(class, 0).iter().zip(delta).map(|(m, e)| m + sign * e));
                        labels.push(class);
                    }
                }
            }
            head.ema_update(&features, &labels, momentum).unwrap();
            for (a, b) in head.centers.data().iter().zip(before.data()) {
                prop_assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
            }
            Ok(())
        },
    )
}

pub fn sigma_scaling_keeps_single_center_ranking() -> Check {
    check(CASES, (head_and_feature(), 0.5f64..4.0), |((head, f), factor)| {
        let single = {
            let mut h = RbfHead::new(head.num_classes(), 1, head.feature_dim(), 0.5, 7).unwrap();
            for c in 0..head.num_classes() {
                h.center_mut(c, 0).copy_from_slice(head.center(c, 0));
            }
            h
        };
        let mut wider = RbfHead::new(single.num_classes(), 1, single.feature_dim(), 0.5 * factor.sqrt(), 7).unwrap();
        wider.centers = single.centers.clone();
        let a = single.scores(&f).unwrap().h;
        let b = wider.scores(&f).unwrap().h;
        for i in 0..a.len() {
            for j in 0..a.len() {
                if a[i] > a[j] {
                    prop_assert!(b[i] > b[j]);
                }
            }
        }
        Ok(())
    })
}

pub fn in_distribution_loss_is_nonnegative() -> Check {
    check(
        CASES,
        (vector(12, 0.0, 1.0), prop::collection::vec(0usize..3, 4)),
        |(h, labels)| {
            let (loss, _) = in_dist_loss(&h, &labels, 3).unwrap();
            prop_assert!(loss >= 0.0);
            let exact: Vec<f64> = labels
                .iter()
                .flat_map(|&l| (0..3).map(move |c| if c == l { 1.0 } else { 0.0 }))
                .collect();
            prop_assert!(in_dist_loss(&exact, &labels, 3).unwrap().0 < 1e-6);
            Ok(())
        },
    )
}

pub fn boundary_loss_decreases_as_scores_fall() -> Check {
    check(
        CASES,
        (vector(6, 0.01, 0.99), 0usize..6, 0.001f64..0.5),
        |(h, i, drop)| {
            let mut lower = h.clone();
            lower[i] = (h[i] - drop).max(0.005);
            prop_assume!(lower[i] < h[i]);
            prop_assert!(boundary_loss(&lower, 3).unwrap().0 < boundary_loss(&h, 3).unwrap().0);
            Ok(())
        },
    )
}

pub fn mask_pool_monotone_and_permutation_invariant() -> Check {
    check(
        CASES,
        (
            vector(6 * 6 * 3, -1.0, 1.0),
            prop::collection::vec(any::<bool>(), 36),
            prop::collection::vec(any::<bool>(), 36),
            any::<u64>(),
        ),
        |(grid, small, extra, seed)| {
            prop_assume!(small.iter().any(|&b| b));
            let large: Vec<bool> = small.iter().zip(&extra).map(|(a, b)| *a || *b).collect();
            let a = mask_pool(&grid, 6, 6, 3, &small, (6, 6)).unwrap();
            let b = mask_pool(&grid, 6, 6, 3, &large, (6, 6)).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!(y >= x);
            }
            // shuffle the feature vectors among the masked cells
            let cells: Vec<usize> = (0..36).filter(|&i| small[i]).collect();
            let mut rotated = grid.clone();
            let shift = (seed as usize) % cells.len();
            for (k, &i) in cells.iter().enumerate() {
                let j = cells[(k + shift) % cells.len()];
                rotated[i * 3..i * 3 + 3].copy_from_slice(&grid[j * 3..j * 3 + 3]);
            }
            prop_assert_eq!(mask_pool(&rotated, 6, 6, 3, &small, (6, 6)).unwrap(), a);
            Ok(())
        },
    )
}

pub fn classification_uncertainty_below_one() -> Check {
    check(
        CASES,
        (vector(4, 0.0, 1.0), any::<bool>(), any::<bool>()),
        |(scores, zero, whole)| {
            let scores = if zero { vec![0.0; 4] } else { scores };
            let r = classify_scores(&scores, &[BACKGROUND_LABEL, 3, 4, 5], whole);
            prop_assert!(r.u_cls >= 0.0 && r.u_cls < 1.0);
            prop_assert_eq!(r.h.len(), 3);
            Ok(())
        },
    )
}

pub fn object_mask_shrinks_as_theta_grows() -> Check {
    check(CASES, (seg_output(), 0.0f64..=1.0, 0.0f64..=1.0), |(seg, a, b)| {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let small = binary_object_mask(&seg, hi);
        let large = binary_object_mask(&seg, lo);
        for (s, l) in small.iter().zip(&large) {
            prop_assert!(!s || *l);
        }
        Ok(())
    })
}

pub fn nms_output_is_sorted_and_separated() -> Check {
    check(
        CASES,
        (prop::collection::vec((bbox(), 0.0f64..1.0), 0..25), 0.05f64..0.95),
        |(boxes, nms)| {
            let props: Vec<RankedProposal> = boxes
                .into_iter()
                .enumerate()
                .map(|(id, (b, o))| RankedProposal {
                    id,
                    proposal: dummy_proposal(b),
                    objectness: o,
                })
                .collect();
            let kept = rank_and_filter(&props, nms).unwrap();
            for w in kept.windows(2) {
                prop_assert!(w[0].objectness >= w[1].objectness);
            }
            for (i, a) in kept.iter().enumerate() {
                for b in &kept[i + 1..] {
                    prop_assert!(a.proposal.bbox.iou(&b.proposal.bbox) <= nms);
                }
            }
            Ok(())
        },
    )
}

pub fn iou_is_symmetric_and_bounded() -> Check {
    check(CASES, (bbox(), bbox()), |(a, b)| {
        let (x, y) = (a.iou(&b), b.iou(&a));
        prop_assert_eq!(x, y);
        prop_assert!((0.0..=1.0).contains(&x));
        prop_assert_eq!(a.iou(&a), 1.0);
        prop_assert!(x < 1.0 || a == b);
        Ok(())
    })
}

pub fn umap_range_and_gating() -> Check {
    check(
        CASES,
        (
            prop::collection::vec((bbox(), vector(LABEL_SIZE * LABEL_SIZE, 0.0, 1.0), 0.0f64..1.0), 0..6),
            0.0f64..=1.0,
            0.0f64..=1.0,
            prop::sample::select(vec!["max", "sum", "mean"]),
        ),
        |(items, a, b, acc)| {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let maps: Vec<ProposalMap> = items
                .iter()
                .enumerate()
                .map(|(id, (bbox, u, c))| ProposalMap {
                    id,
                    bbox: *bbox,
                    u_seg: u,
                    u_cls: *c,
                })
                .collect();
            let accumulator = build_accumulator(acc).unwrap();
            let size = (64, 64);
            let low = compose_uncertainty(&maps, lo, accumulator.as_ref(), size).unwrap();
            let high = compose_uncertainty(&maps, hi, accumulator.as_ref(), size).unwrap();
            for y in 0..64 {
                for x in 0..64 {
                    let v = low.umap.get(x, y);
                    prop_assert!((0.0..=1.0).contains(&v));
                    let centre = (x as f64 + 0.5, y as f64 + 0.5);
                    let covered = items.iter().any(|(bx, _, _)| {
                        centre.0 >= bx.x && centre.0 <= bx.x + bx.w && centre.1 >= bx.y && centre.1 <= bx.y + bx.h
                    });
                    if !covered {
                        prop_assert_eq!(v, 0.0);
                    }
                    if acc == "max" {
                        prop_assert!(high.umap.get(x, y) <= v);
                    }
                }
            }
            let none = compose_uncertainty(&maps, 1.0, accumulator.as_ref(), size).unwrap();
            prop_assert!(none.umap.values.iter().all(|&v| v == 0.0));
            Ok(())
        },
    )
}

pub fn boundary_matches_brute_force() -> Check {
    check(CASES, (label_map(), 1usize..5), |(labels, radius)| {
        prop_assert_eq!(
            extract_boundary_pixels(&labels, LABEL_SIZE, radius),
            brute_boundary(&labels, LABEL_SIZE, radius)
        );
        Ok(())
    })
}

pub fn training_split_has_no_unknown_pixels() -> Check {
    check(200, any::<u64>(), |seed| {
        let params = BenchParams {
            train_scenes: 2,
            test_scenes: 1,
            ..BenchParams::default()
        };
        let data = build_dataset(&params, seed).unwrap();
        let recipe = feature_recipe("appearance").unwrap();
        for i in data.indices(Split::Train) {
            let p = data.render(i, recipe.as_ref()).unwrap();
            for k in 0..LABEL_SIZE * LABEL_SIZE {
                let class = match p.label(k) {
                    PixelLabel::Class(c) | PixelLabel::Boundary(c) => c,
                    PixelLabel::Ignore => p.classes[k],
                };
                prop_assert!(!is_unknown(class));
            }
            prop_assert!(p.gt_class.map_or(true, |c| !is_unknown(c)));
        }
        for (s, split) in data.scenes.iter().zip(&data.scene_splits) {
            if *split == rbfood::synthbench::SceneSplit::Train {
                prop_assert!(s.pixel_labels.iter().all(|&c| !is_unknown(c)));
            }
        }
        Ok(())
    })
}

#[allow(dead_code)]
pub const CHECKS: &[(&str, fn() -> Check)] = &[
    ("kernel_scores_are_bounded", kernel_scores_are_bounded),
    ("translation_equivariance", translation_equivariance),
    ("single_center_decays_radially", single_center_decays_radially),
    ("ema_fixed_point", ema_fixed_point),
    (
        "sigma_scaling_keeps_single_center_ranking",
        sigma_scaling_keeps_single_center_ranking,
    ),
    (
        "in_distribution_loss_is_nonnegative",
        in_distribution_loss_is_nonnegative,
    ),
    (
        "boundary_loss_decreases_as_scores_fall",
        boundary_loss_decreases_as_scores_fall,
    ),
    (
        "mask_pool_monotone_and_permutation_invariant",
        mask_pool_monotone_and_permutation_invariant,
    ),
    (
        "classification_uncertainty_below_one",
        classification_uncertainty_below_one,
    ),
    ("object_mask_shrinks_as_theta_grows", object_mask_shrinks_as_theta_grows),
    ("nms_output_is_sorted_and_separated", nms_output_is_sorted_and_separated),
    ("iou_is_symmetric_and_bounded", iou_is_symmetric_and_bounded),
    ("umap_range_and_gating", umap_range_and_gating),
    ("boundary_matches_brute_force", boundary_matches_brute_force),
    (
        "training_split_has_no_unknown_pixels",
        training_split_has_no_unknown_pixels,
    ),
];
