//! Soft-IoU primitive and the two attention losses built on it.
//!
//! The shared quantity is `sum(min(a,b)) / sum(a+b)` over two nonnegative
//! maps. Because the denominator is the sum (not the union) it ranges in
//! [0, 0.5], reaching 0.5 exactly when the maps coincide. The segregation
//! loss drives it *down* across concept pairs; the retention loss drives it
//! *up* against the previous step's binary masks.

use std::collections::BTreeMap;

use crate::attention::AttentionMaps;
use crate::error::{Error, Result};
use crate::masks::BinaryMask;
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Result of one soft-IoU evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftIou<T> {
    pub value: T,
    /// Set when both maps were all-zero; the value is then defined as 0.
    pub degenerate: bool,
}

/// `sum(min(a,b)) / sum(a+b)` over two equally-shaped nonnegative maps.
pub fn soft_iou<T: Scalar>(a: &[T], b: &[T]) -> Result<SoftIou<T>> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op: "soft_iou",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    check_nonneg("soft_iou", a)?;
    check_nonneg("soft_iou", b)?;
    let mut num = T::zero();
    let mut den = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        num += x.min(y);
        den += x + y;
    }
    if den == T::zero() {
        return Ok(SoftIou {
            value: T::zero(),
            degenerate: true,
        });
    }
    Ok(SoftIou {
        value: num / den,
        degenerate: false,
    })
}

fn check_nonneg<T: Scalar>(name: &'static str, vals: &[T]) -> Result<()> {
    if vals.iter().any(|v| *v < T::zero()) {
        return Err(Error::InvalidParam {
            name,
            reason: "inputs must be nonnegative".into(),
        });
    }
    Ok(())
}

/// Records the soft IoU of two vector nodes on the tape. Both-all-zero
/// inputs cannot be divided, so they contribute a constant 0 node and the
/// degenerate flag.
pub fn soft_iou_node<T: Scalar>(
    tape: &mut Tape<T>,
    a: NodeId,
    b: NodeId,
) -> Result<(NodeId, bool)> {
    check_nonneg("soft_iou", tape.value(a)?.data())?;
    check_nonneg("soft_iou", tape.value(b)?.data())?;
    let den_value = tape.value(a)?.sum() + tape.value(b)?.sum();
    if den_value == T::zero() {
        return Ok((tape.leaf(Tensor::scalar(T::zero())), true));
    }
    let overlap = tape.min(a, b)?;
    let num = tape.sum(overlap)?;
    let both = tape.add(a, b)?;
    let den = tape.sum(both)?;
    Ok((tape.div(num, den)?, false))
}

/// Segregation fragment: the pairwise soft-IoU total and its breakdown.
#[derive(Debug, Clone)]
pub struct SegFragment<T> {
    pub node: Option<NodeId>,
    pub total: T,
    pub per_pair: BTreeMap<(usize, usize), T>,
    pub degenerate_pairs: Vec<(usize, usize)>,
    /// Set when fewer than two concepts are present (no pairs to separate).
    pub single_concept: bool,
}

/// Sum of soft IoU over all unordered concept pairs of the normalized maps.
pub fn segregation_loss<T: Scalar>(
    tape: &mut Tape<T>,
    maps: &AttentionMaps<T>,
) -> Result<SegFragment<T>> {
    if !maps.is_normalized() {
        return Err(Error::NotNormalized);
    }
    let n = maps.concept_count();
    if n < 2 {
        return Ok(SegFragment {
            node: None,
            total: T::zero(),
            per_pair: BTreeMap::new(),
            degenerate_pairs: Vec::new(),
            single_concept: true,
        });
    }
    let cols: Vec<NodeId> = (0..n)
        .map(|j| tape.col(maps.node(), j))
        .collect::<Result<_>>()?;
    let mut per_pair = BTreeMap::new();
    let mut degenerate_pairs = Vec::new();
    let mut node: Option<NodeId> = None;
    let mut total = T::zero();
    for i in 0..n {
        for j in (i + 1)..n {
            let (iou, degenerate) = soft_iou_node(tape, cols[i], cols[j])?;
            let value = tape.value(iou)?.item();
            per_pair.insert((i, j), value);
            total += value;
            if degenerate {
                degenerate_pairs.push((i, j));
            }
            node = Some(match node {
                Some(acc) => tape.add(acc, iou)?,
                None => iou,
            });
        }
    }
    Ok(SegFragment {
        node,
        total,
        per_pair,
        degenerate_pairs,
        single_concept: false,
    })
}

/// Retention fragment: per-concept `1 - soft_iou(map, mask)` terms.
#[derive(Debug, Clone)]
pub struct RetFragment<T> {
    pub node: Option<NodeId>,
    pub total: T,
    pub per_concept: BTreeMap<usize, T>,
    /// Concepts whose mask was empty; their term is skipped.
    pub skipped: Vec<usize>,
}

/// Sum over concepts of `1 - soft_iou(current normalized map, mask)`, where
/// the masks are the proxy ground truth produced at the previous step.
pub fn retention_loss<T: Scalar>(
    tape: &mut Tape<T>,
    maps: &AttentionMaps<T>,
    masks: &[BinaryMask],
) -> Result<RetFragment<T>> {
    if !maps.is_normalized() {
        return Err(Error::NotNormalized);
    }
    let n = maps.concept_count();
    if masks.len() != n {
        return Err(Error::InvalidParam {
            name: "retention_loss",
            reason: format!("{} masks for {n} concepts", masks.len()),
        });
    }
    let mut per_concept = BTreeMap::new();
    let mut skipped = Vec::new();
    let mut node: Option<NodeId> = None;
    let mut total = T::zero();
    let one = tape.leaf(Tensor::scalar(T::one()));
    for (m, mask) in masks.iter().enumerate() {
        if mask.resolution() != maps.resolution() {
            return Err(Error::InvalidParam {
                name: "retention_loss",
                reason: format!(
                    "mask resolution {} does not match maps resolution {}",
                    mask.resolution(),
                    maps.resolution()
                ),
            });
        }
        if mask.is_empty() {
            skipped.push(m);
            continue;
        }
        let map_col = tape.col(maps.node(), m)?;
        let mask_leaf = tape.leaf(mask.to_tensor::<T>());
        let (iou, _) = soft_iou_node(tape, map_col, mask_leaf)?;
        let term = tape.sub(one, iou)?;
        let value = tape.value(term)?.item();
        per_concept.insert(m, value);
        total += value;
        node = Some(match node {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    Ok(RetFragment {
        node,
        total,
        per_concept,
        skipped,
    })
}

/// Per-step loss summary carried in the run trace and the CSV log.
#[derive(Debug, Clone)]
pub struct LossReport<T> {
    pub seg_total: T,
    pub ret_total: T,
    pub total: T,
    pub lambda_seg: T,
    pub lambda_ret: T,
    pub per_pair_seg: BTreeMap<(usize, usize), T>,
    pub per_concept_ret: BTreeMap<usize, T>,
    pub degenerate_pairs: Vec<(usize, usize)>,
    pub skipped_ret: Vec<usize>,
    pub single_concept: bool,
}

/// Combines the fragments into the weighted total, recording the combined
/// node when any fragment contributed one.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    seg: &SegFragment<T>,
    ret: Option<&RetFragment<T>>,
    lambda_seg: T,
    lambda_ret: T,
) -> Result<(Option<NodeId>, LossReport<T>)> {
    for (name, value) in [("lambda_seg", lambda_seg), ("lambda_ret", lambda_ret)] {
        if value.is_nan() || value < T::zero() {
            return Err(Error::NegativeWeight {
                name,
                value: value.to_string(),
            });
        }
    }
    let mut node: Option<NodeId> = None;
    if let Some(seg_node) = seg.node {
        node = Some(tape.scale(seg_node, lambda_seg)?);
    }
    if let Some(ret_node) = ret.and_then(|r| r.node) {
        let scaled = tape.scale(ret_node, lambda_ret)?;
        node = Some(match node {
            Some(acc) => tape.add(acc, scaled)?,
            None => scaled,
        });
    }
    let ret_total = ret.map(|r| r.total).unwrap_or_else(T::zero);
    let report = LossReport {
        seg_total: seg.total,
        ret_total,
        total: lambda_seg * seg.total + lambda_ret * ret_total,
        lambda_seg,
        lambda_ret,
        per_pair_seg: seg.per_pair.clone(),
        per_concept_ret: ret.map(|r| r.per_concept.clone()).unwrap_or_default(),
        degenerate_pairs: seg.degenerate_pairs.clone(),
        skipped_ret: ret.map(|r| r.skipped.clone()).unwrap_or_default(),
        single_concept: seg.single_concept,
    };
    Ok((node, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{compute_attention, normalize_maps, ConceptSet, ProjectionWeights};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn disjoint_supports_give_zero() {
        let a = [0.0f64, 0.7, 0.0, 0.2];
        let b = [0.5f64, 0.0, 0.3, 0.0];
        let iou = soft_iou(&a, &b).unwrap();
        assert_eq!(iou.value, 0.0);
        assert!(!iou.degenerate);
    }

    #[test]
    fn identical_maps_give_half() {
        let a = [0.2f64, 0.8, 0.1];
        let iou = soft_iou(&a, &a).unwrap();
        assert!((iou.value - 0.5).abs() < 1e-15);
    }

    #[test]
    fn hand_computed_example() {
        let a = [0.2f64, 0.8];
        let b = [0.6f64, 0.4];
        let iou = soft_iou(&a, &b).unwrap();
        assert!((iou.value - 0.3).abs() < 1e-15);
    }

    #[test]
    fn all_zero_inputs_are_degenerate() {
        let z = [0.0f64; 4];
        let iou = soft_iou(&z, &z).unwrap();
        assert_eq!(iou.value, 0.0);
        assert!(iou.degenerate);
    }

    #[test]
    fn negative_inputs_are_rejected() {
        assert!(soft_iou(&[-0.1f64, 0.2], &[0.0, 0.1]).is_err());
    }

    fn normalized_fixture(tape: &mut Tape<f64>, n: usize, seed: u64) -> AttentionMaps<f64> {
        let names: Vec<String> = (0..n).map(|i| format!("c{i}")).collect();
        let concepts = ConceptSet::orthonormal(&names, 4, 3).unwrap();
        let weights = ProjectionWeights::shared_orthogonal(4, 4, 3.0, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = tape.leaf(Tensor::standard_normal(&[16, 4], &mut rng));
        let maps = compute_attention(tape, z, &concepts, &weights).unwrap();
        normalize_maps(tape, &maps, true).unwrap()
    }

    #[test]
    fn three_identical_slices_give_three_halves() {
        // build maps whose three slices are identical via a leaf node
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..16)
            .flat_map(|p| {
                let v = (p as f64) / 15.0;
                [v, v, v]
            })
            .collect();
        let leaf = tape.leaf(Tensor::new(vec![16, 3], data).unwrap());
        let node = tape.minmax_normalize_cols(leaf, true).unwrap();
        let maps = AttentionMaps::from_node(&tape, node, true).unwrap();
        let seg = segregation_loss(&mut tape, &maps).unwrap();
        assert!((seg.total - 1.5).abs() < 1e-12);
        assert_eq!(seg.per_pair.len(), 3);
    }

    #[test]
    fn single_concept_flags_warning() {
        let mut tape = Tape::new();
        let maps = normalized_fixture(&mut tape, 1, 2);
        let seg = segregation_loss(&mut tape, &maps).unwrap();
        assert!(seg.single_concept);
        assert_eq!(seg.total, 0.0);
        assert!(seg.node.is_none());
    }

    #[test]
    fn retention_of_exact_binary_match_is_half() {
        let mut tape = Tape::new();
        let r = 4;
        // map equals the mask exactly
        let mask = BinaryMask::from_rect("a", 0, r, (1, 1, 2, 2)).unwrap();
        let map: Vec<f64> = mask.to_tensor::<f64>().data().to_vec();
        let leaf = tape.leaf(Tensor::new(vec![r * r, 1], map).unwrap());
        let maps = AttentionMaps::from_node(&tape, leaf, true).unwrap();
        let ret = retention_loss(&mut tape, &maps, &[mask]).unwrap();
        assert!((ret.total - 0.5).abs() < 1e-15);
    }

    #[test]
    fn retention_of_all_zero_map_is_one() {
        let mut tape = Tape::new();
        let r = 4;
        let mask = BinaryMask::from_rect("a", 0, r, (0, 0, 1, 1)).unwrap();
        let leaf = tape.leaf(Tensor::<f64>::zeros(&[r * r, 1]));
        let maps = AttentionMaps::from_node(&tape, leaf, true).unwrap();
        let ret = retention_loss(&mut tape, &maps, &[mask]).unwrap();
        assert!((ret.total - 1.0).abs() < 1e-15);
    }

    #[test]
    fn retention_of_half_intensity_map() {
        // A = 0.5 * B inside the mask: soft_iou = 1/3, term = 2/3
        let mut tape = Tape::new();
        let r = 4;
        let mask = BinaryMask::from_rect("a", 0, r, (0, 0, 1, 1)).unwrap();
        let map: Vec<f64> = mask
            .to_tensor::<f64>()
            .data()
            .iter()
            .map(|v| 0.5 * v)
            .collect();
        let leaf = tape.leaf(Tensor::new(vec![r * r, 1], map).unwrap());
        let maps = AttentionMaps::from_node(&tape, leaf, true).unwrap();
        let ret = retention_loss(&mut tape, &maps, &[mask]).unwrap();
        assert!((ret.total - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_mask_is_skipped_and_flagged() {
        let mut tape = Tape::new();
        let r = 4;
        let empty = BinaryMask::empty("a", 0, r);
        let leaf = tape.leaf(Tensor::full(&[r * r, 1], 0.25f64));
        let maps = AttentionMaps::from_node(&tape, leaf, true).unwrap();
        let ret = retention_loss(&mut tape, &maps, &[empty]).unwrap();
        assert_eq!(ret.skipped, vec![0]);
        assert_eq!(ret.total, 0.0);
        assert!(ret.node.is_none());
    }

    #[test]
    fn total_loss_combines_weights() {
        let mut tape = Tape::new();
        let seg: SegFragment<f64> = SegFragment {
            node: None,
            total: 0.3,
            per_pair: BTreeMap::new(),
            degenerate_pairs: vec![],
            single_concept: false,
        };
        let ret = RetFragment {
            node: None,
            total: 0.5,
            per_concept: BTreeMap::new(),
            skipped: vec![],
        };
        let (_, r1) = total_loss(&mut tape, &seg, Some(&ret), 1.0, 1.0).unwrap();
        assert!((r1.total - 0.8).abs() < 1e-15);
        let (_, r2) = total_loss(&mut tape, &seg, Some(&ret), 2.0, 0.5).unwrap();
        assert!((r2.total - 0.85).abs() < 1e-15);
        let (_, r3) = total_loss(&mut tape, &seg, None, 1.0, 1.0).unwrap();
        assert!((r3.total - 0.3).abs() < 1e-15);
        assert!(total_loss(&mut tape, &seg, Some(&ret), -1.0, 1.0).is_err());
    }

    #[test]
    fn binary_soft_iou_matches_set_oracle_on_3x3() {
        // exhaustive equivalence with |a n b| / (|a| + |b|)
        for a_bits in 0u32..512 {
            for b_bits in 0u32..512 {
                let a: Vec<f64> = (0..9).map(|i| ((a_bits >> i) & 1) as f64).collect();
                let b: Vec<f64> = (0..9).map(|i| ((b_bits >> i) & 1) as f64).collect();
                let got = soft_iou(&a, &b).unwrap().value;
                let inter = (a_bits & b_bits).count_ones() as f64;
                let total = (a_bits.count_ones() + b_bits.count_ones()) as f64;
                let want = if total == 0.0 { 0.0 } else { inter / total };
                assert_eq!(got, want, "a={a_bits:b} b={b_bits:b}");
            }
        }
    }

    proptest! {
        #[test]
        fn symmetry_is_exact(
            a in proptest::collection::vec(0.0f64..1.0, 9),
            b in proptest::collection::vec(0.0f64..1.0, 9),
        ) {
            let ab = soft_iou(&a, &b).unwrap().value;
            let ba = soft_iou(&b, &a).unwrap().value;
            prop_assert_eq!(ab, ba);
        }

        #[test]
        fn value_stays_in_bounds(
            a in proptest::collection::vec(0.0f64..1.0, 16),
            b in proptest::collection::vec(0.0f64..1.0, 16),
        ) {
            let iou = soft_iou(&a, &b).unwrap();
            prop_assert!(iou.value >= 0.0 && iou.value <= 0.5);
        }

        #[test]
        fn scale_invariance(
            a in proptest::collection::vec(0.01f64..1.0, 8),
            b in proptest::collection::vec(0.01f64..1.0, 8),
            c in 0.01f64..100.0,
        ) {
            let base = soft_iou(&a, &b).unwrap().value;
            let sa: Vec<f64> = a.iter().map(|v| v * c).collect();
            let sb: Vec<f64> = b.iter().map(|v| v * c).collect();
            let scaled = soft_iou(&sa, &sb).unwrap().value;
            prop_assert!((base - scaled).abs() < 1e-12);
        }

        #[test]
        fn moving_mass_off_support_never_increases_overlap(
            a in proptest::collection::vec(0.0f64..1.0, 8),
            b in proptest::collection::vec(0.01f64..1.0, 8),
            from in 0usize..8,
            frac in 0.1f64..1.0,
        ) {
            // zero out a's last cell so there is guaranteed off-support room
            let mut a = a;
            a[7] = 0.0;
            let before = soft_iou(&a, &b).unwrap().value;
            let mut b2 = b.clone();
            let moved = b2[from] * frac;
            b2[from] -= moved;
            b2[7] += moved;
            if a[from] > 0.0 {
                let after = soft_iou(&a, &b2).unwrap().value;
                prop_assert!(after <= before + 1e-12);
            }
        }
    }
}
