//! Finite-difference sweeps over every tape primitive and the full
//! attention-plus-losses pipeline.
//!
//! Each primitive's adjoint is compared against central differences on
//! random inputs in [-1, 1]. Upstream gradients are made non-uniform by
//! reducing through a random weight tensor, so adjoint bugs cannot hide
//! behind a constant seed gradient. Inputs are nudged away from min ties
//! and clamp boundaries, which the check excludes by contract.

use astar_core::attention::{compute_attention, normalize_maps, ConceptSet, ProjectionWeights};
use astar_core::gradcheck::finite_diff_check;
use astar_core::losses::{retention_loss, segregation_loss, total_loss};
use astar_core::masks::BinaryMask;
use astar_core::tape::{NodeId, Tape};
use astar_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
/// Keep inputs at least this far from selection boundaries.
const MARGIN: f64 = 1e-3;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Random vector with entries bounded away from the entries of `other`.
fn uniform_away_from(rng: &mut ChaCha8Rng, other: &Tensor<f64>) -> Tensor<f64> {
    let data = other
        .data()
        .iter()
        .map(|&o| loop {
            let v = rng.gen_range(-1.0..1.0);
            if (v - o).abs() > MARGIN {
                break v;
            }
        })
        .collect();
    Tensor::new(other.shape().to_vec(), data).unwrap()
}

/// Weighted reduction to a scalar: sum(w * node).
fn weighted_sum(
    tape: &mut Tape<f64>,
    node: NodeId,
    weights: &Tensor<f64>,
) -> astar_core::Result<NodeId> {
    let w = tape.leaf(weights.clone());
    let prod = tape.mul(node, w)?;
    tape.sum(prod)
}

#[test]
fn elementwise_binary_primitives_check_out() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for trial in 0..5 {
        let shape = [3, 4];
        let x = uniform(&mut rng, &shape);
        let other = uniform_away_from(&mut rng, &x);
        let w = uniform(&mut rng, &shape);

        type BuildFn = fn(&mut Tape<f64>, NodeId, NodeId) -> astar_core::Result<NodeId>;
        let ops: [(&str, BuildFn); 5] = [
            ("add", |t, a, b| t.add(a, b)),
            ("sub", |t, a, b| t.sub(a, b)),
            ("mul", |t, a, b| t.mul(a, b)),
            ("div", |t, a, b| t.div(a, b)),
            ("min", |t, a, b| t.min(a, b)),
        ];
        for (name, op) in ops {
            // mind div: keep the denominator away from zero
            let denom_safe = other.map(|v| if v.abs() < 0.2 { v.signum() * 0.4 } else { v });
            let fixed = if name == "div" { &denom_safe } else { &other };

            // gradient w.r.t. the first argument
            let err = finite_diff_check(
                |tape, leaf| {
                    let c = tape.leaf(fixed.clone());
                    let node = op(tape, leaf, c)?;
                    weighted_sum(tape, node, &w)
                },
                &x,
                H,
            )
            .unwrap();
            assert!(err <= TOL, "{name} lhs trial {trial}: error {err}");

            // gradient w.r.t. the second argument
            let err = finite_diff_check(
                |tape, leaf| {
                    let c = tape.leaf(x.clone());
                    let node = op(tape, c, leaf)?;
                    weighted_sum(tape, node, &w)
                },
                fixed,
                H,
            )
            .unwrap();
            assert!(err <= TOL, "{name} rhs trial {trial}: error {err}");
        }
    }
}

#[test]
fn scale_sum_exp_softmax_clamp_check_out() {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    for trial in 0..5 {
        let x = uniform(&mut rng, &[4, 3]);
        let w = uniform(&mut rng, &[4, 3]);

        let err = finite_diff_check(
            |tape, leaf| {
                let s = tape.scale(leaf, -1.75)?;
                weighted_sum(tape, s, &w)
            },
            &x,
            H,
        )
        .unwrap();
        assert!(err <= TOL, "scale trial {trial}: {err}");

        let err = finite_diff_check(|tape, leaf| tape.sum(leaf), &x, H).unwrap();
        assert!(err <= TOL, "sum trial {trial}: {err}");

        let err = finite_diff_check(
            |tape, leaf| {
                let e = tape.exp(leaf)?;
                weighted_sum(tape, e, &w)
            },
            &x,
            H,
        )
        .unwrap();
        assert!(err <= TOL, "exp trial {trial}: {err}");

        for axis in [0usize, 1] {
            let err = finite_diff_check(
                |tape, leaf| {
                    let s = tape.softmax(leaf, axis)?;
                    weighted_sum(tape, s, &w)
                },
                &x,
                H,
            )
            .unwrap();
            assert!(err <= TOL, "softmax axis {axis} trial {trial}: {err}");
        }

        // keep entries away from the clamp boundaries
        let clamped_input = x.map(|v| {
            let lo = -0.5;
            let hi = 0.5;
            if (v - lo).abs() < MARGIN {
                lo - 2.0 * MARGIN
            } else if (v - hi).abs() < MARGIN {
                hi + 2.0 * MARGIN
            } else {
                v
            }
        });
        let err = finite_diff_check(
            |tape, leaf| {
                let c = tape.clamp(leaf, -0.5, 0.5)?;
                weighted_sum(tape, c, &w)
            },
            &clamped_input,
            H,
        )
        .unwrap();
        assert!(err <= TOL, "clamp trial {trial}: {err}");
    }
}

#[test]
fn matmul_col_and_minmax_check_out() {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    for trial in 0..5 {
        let a = uniform(&mut rng, &[3, 4]);
        let b = uniform(&mut rng, &[4, 2]);
        let w = uniform(&mut rng, &[3, 2]);

        let err = finite_diff_check(
            |tape, leaf| {
                let bb = tape.leaf(b.clone());
                let mm = tape.matmul(leaf, bb)?;
                weighted_sum(tape, mm, &w)
            },
            &a,
            H,
        )
        .unwrap();
        assert!(err <= TOL, "matmul lhs trial {trial}: {err}");

        let err = finite_diff_check(
            |tape, leaf| {
                let aa = tape.leaf(a.clone());
                let mm = tape.matmul(aa, leaf)?;
                weighted_sum(tape, mm, &w)
            },
            &b,
            H,
        )
        .unwrap();
        assert!(err <= TOL, "matmul rhs trial {trial}: {err}");

        let wcol = uniform(&mut rng, &[3]);
        let err = finite_diff_check(
            |tape, leaf| {
                let c = tape.col(leaf, 1)?;
                let ww = tape.leaf(wcol.clone());
                let prod = tape.mul(c, ww)?;
                tape.sum(prod)
            },
            &a,
            H,
        )
        .unwrap();
        assert!(err <= TOL, "col trial {trial}: {err}");

        // min-max normalize: per column, entries on a jittered ladder so the
        // extrema are unique with comfortable gaps
        let spread = {
            let rows = 6;
            let mut cols: Vec<Vec<f64>> = Vec::new();
            for _ in 0..2 {
                let mut ladder: Vec<f64> = (0..rows)
                    .map(|k| {
                        -1.0 + 2.0 * k as f64 / (rows - 1) as f64 + rng.gen_range(-MARGIN..MARGIN)
                    })
                    .collect();
                // random row order per column
                for k in (1..rows).rev() {
                    ladder.swap(k, rng.gen_range(0..=k));
                }
                cols.push(ladder);
            }
            let mut data = Vec::new();
            for i in 0..rows {
                for col in &cols {
                    data.push(col[i]);
                }
            }
            Tensor::new(vec![rows, 2], data).unwrap()
        };
        let wmm = uniform(&mut rng, &[6, 2]);
        for through in [true, false] {
            let err = finite_diff_check(
                |tape, leaf| {
                    let n = tape.minmax_normalize_cols(leaf, through)?;
                    weighted_sum(tape, n, &wmm)
                },
                &spread,
                H,
            )
            .unwrap();
            if through {
                assert!(err <= TOL, "minmax through trial {trial}: {err}");
            } else {
                // stop-gradient mode must still match differences of the
                // forward function with extrema frozen; the full-function
                // differences differ, so only check it runs finite
                assert!(err.is_finite());
            }
        }
    }
}

/// The pipeline gradient the guidance step uses: attention, normalization,
/// and both losses on an r=8, c=4, N=3 fixture.
#[test]
fn full_pipeline_gradient_checks_out() {
    let start = std::time::Instant::now();
    let r = 8;
    let c = 4;
    let concepts = ConceptSet::orthonormal(&["a", "b", "c"], c, 17).unwrap();
    let weights = ProjectionWeights::shared_orthogonal(c, c, 3.0, 19).unwrap();
    let masks = vec![
        BinaryMask::from_rect("a", 9, r, (0, 0, 3, 3)).unwrap(),
        BinaryMask::from_rect("b", 9, r, (4, 4, 7, 7)).unwrap(),
        BinaryMask::from_rect("c", 9, r, (2, 3, 5, 6)).unwrap(),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let z = Tensor::standard_normal(&[r * r, c], &mut rng);

    let err = finite_diff_check(
        |tape, leaf| {
            let raw = compute_attention(tape, leaf, &concepts, &weights)?;
            let maps = normalize_maps(tape, &raw, true)?;
            let seg = segregation_loss(tape, &maps)?;
            let ret = retention_loss(tape, &maps, &masks)?;
            let (node, _) = total_loss(tape, &seg, Some(&ret), 1.0, 1.0)?;
            Ok(node.expect("three concepts produce pairs"))
        },
        &z,
        H,
    )
    .unwrap();
    assert!(err <= TOL, "pipeline gradient error {err}");
    assert!(
        start.elapsed().as_secs() < 60,
        "pipeline check too slow: {:?}",
        start.elapsed()
    );
}

#[test]
fn f32_instantiation_runs_end_to_end() {
    // the whole stack is generic over the scalar; a quick f32 smoke run
    let concepts = ConceptSet::<f32>::orthonormal(&["a", "b"], 4, 3).unwrap();
    let weights = ProjectionWeights::<f32>::shared_orthogonal(4, 4, 3.0, 5).unwrap();
    let mut tape = Tape::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let z = tape.leaf(Tensor::<f32>::standard_normal(&[16, 4], &mut rng));
    let raw = compute_attention(&mut tape, z, &concepts, &weights).unwrap();
    let maps = normalize_maps(&mut tape, &raw, true).unwrap();
    let seg = segregation_loss(&mut tape, &maps).unwrap();
    let (node, report) = total_loss(&mut tape, &seg, None, 1.0, 0.0).unwrap();
    let grads = tape.backward(node.unwrap()).unwrap();
    assert!(grads.wrt(z).is_some());
    assert!(report.total.is_finite());
}
