mod common;

use proptest::prelude::*;
use rand::Rng;
use vgloop::maskio::{
    assign_masks_to_layers, build_hierarchy, link_parents, load_mask_stack, save_mask_stack,
    validate_hierarchy, validate_hierarchy_with, MaskHierarchy, ParentRef, RawMaskStack,
    ValidationConfig, Violation,
};
use vgloop::BinaryMask;

fn random_rect(r: &mut rand_chacha::ChaCha8Rng, w: usize, h: usize) -> BinaryMask {
    let x0 = r.random_range(0..w);
    let y0 = r.random_range(0..h);
    let x1 = r.random_range(x0 + 1..=w);
    let y1 = r.random_range(y0 + 1..=h);
    BinaryMask::from_fn(w, h, |x, y| x >= x0 && x < x1 && y >= y0 && y < y1)
}

fn random_stack(seed: u64) -> RawMaskStack {
    let mut r = common::rng(seed);
    let (w, h) = (r.random_range(4..24), r.random_range(4..24));
    let levels = (0..r.random_range(1..4))
        .map(|t| {
            (
                t as i64,
                (0..r.random_range(1..6))
                    .map(|_| random_rect(&mut r, w, h))
                    .collect(),
            )
        })
        .collect();
    RawMaskStack::new(w, h, levels).unwrap()
}

fn sizes(h: &MaskHierarchy) -> Vec<usize> {
    h.layers.iter().map(|l| l.masks.len()).collect()
}

fn coverage(h: &MaskHierarchy) -> usize {
    h.coverage().count()
}

proptest! {
    #[test]
    fn assignment_is_deterministic(seed in any::<u64>(), tau in 0.05f64..=1.0) {
        let s = random_stack(seed);
        prop_assert_eq!(assign_masks_to_layers(&s, tau).unwrap(), assign_masks_to_layers(&s, tau).unwrap());
    }

    #[test]
    fn accepted_masks_respect_the_threshold(seed in any::<u64>(), tau in 0.05f64..=1.0) {
        let s = random_stack(seed);
        let h = assign_masks_to_layers(&s, tau).unwrap();
        prop_assert_eq!(h.depth(), s.levels.len());
        let mut union = BinaryMask::new(s.width, s.height);
        for layer in &h.layers {
            for w in layer.masks.windows(2) {
                prop_assert!(w[0].pixel_count >= w[1].pixel_count);
            }
            for m in &layer.masks {
                let frac = m.mask.intersection_count(&union) as f64 / m.pixel_count as f64;
                prop_assert!(frac <= tau);
                union.union_with(&m.mask);
            }
        }
    }

    #[test]
    fn full_threshold_coverage_is_maximal(seed in any::<u64>(), tau in 0.05f64..=1.0) {
        let s = random_stack(seed);
        let all = coverage(&assign_masks_to_layers(&s, 1.0).unwrap());
        let mut union = BinaryMask::new(s.width, s.height);
        for l in &s.levels {
            for m in &l.masks {
                union.union_with(m);
            }
        }
        prop_assert_eq!(all, union.count());
        prop_assert!(coverage(&assign_masks_to_layers(&s, tau).unwrap()) <= all);
    }

    #[test]
    fn parents_point_one_layer_up(seed in any::<u64>(), tau_occ in 0.3f64..=1.0, tau_parent in 0.0f64..=1.0) {
        let s = random_stack(seed);
        let h = build_hierarchy(&s, tau_occ, tau_parent).unwrap();
        for layer in &h.layers {
            for m in &layer.masks {
                match m.parent {
                    ParentRef::Root => {}
                    ParentRef::Mask(p) => {
                        prop_assert_eq!(p.layer + 1, m.id.layer);
                        let pm = h.get(p).unwrap();
                        let frac = m.mask.intersection_count(&pm.mask) as f64 / m.pixel_count as f64;
                        prop_assert!(frac >= tau_parent);
                    }
                    ParentRef::Unlinked => prop_assert!(false, "unlinked after build"),
                }
            }
        }
        let v = validate_hierarchy_with(&h, &ValidationConfig { tau_parent, ..Default::default() });
        let only_overlaps = v.iter().all(|x| matches!(x, Violation::ExclusivityOverlap { .. }));
        prop_assert!(only_overlaps, "{:?}", v);
    }
}

fn bits(w: usize, h: usize, f: impl Fn(usize, usize) -> bool) -> BinaryMask {
    BinaryMask::from_fn(w, h, f)
}

/// Raising the discard threshold can shrink total coverage. At 0.5 the
/// second mask (55% covered) is dropped, so the third is only 25% covered
/// and is kept; at 0.6 the second is kept and then covers 70% of the
/// third, which is dropped.
#[test]
fn coverage_is_not_monotone_in_the_threshold() {
    let w = 175;
    let x = bits(w, 1, |c, _| c < 100);
    let a = bits(w, 1, |c, _| (45..145).contains(&c));
    let y = bits(w, 1, |c, _| c >= 75);
    let stack = RawMaskStack::new(w, 1, vec![(1, vec![x]), (2, vec![a]), (3, vec![y])]).unwrap();
    let low = assign_masks_to_layers(&stack, 0.5).unwrap();
    let high = assign_masks_to_layers(&stack, 0.6).unwrap();
    assert_eq!(sizes(&low), vec![1, 0, 1]);
    assert_eq!(sizes(&high), vec![1, 1, 0]);
    assert_eq!(coverage(&low), 175);
    assert_eq!(coverage(&high), 145);
}

#[test]
fn half_covered_mask_depends_on_threshold() {
    let a = bits(8, 8, |x, _| x < 4);
    let b = bits(8, 8, |x, y| (2..6).contains(&x) && y < 8);
    let stack = RawMaskStack::new(8, 8, vec![(1, vec![a]), (2, vec![b])]).unwrap();
    assert_eq!(
        assign_masks_to_layers(&stack, 0.9).unwrap().layers[1]
            .masks
            .len(),
        1
    );
    assert_eq!(
        assign_masks_to_layers(&stack, 0.4).unwrap().layers[1]
            .masks
            .len(),
        0
    );
}

#[test]
fn links_and_validation_examples() {
    let parent = bits(8, 8, |x, _| x < 4);
    let inside = bits(8, 8, |x, y| x < 3 && y < 3);
    let outside = bits(8, 8, |x, y| x >= 6 && y >= 6);
    let stack =
        RawMaskStack::new(8, 8, vec![(1, vec![parent]), (2, vec![inside, outside])]).unwrap();
    let h = link_parents(&assign_masks_to_layers(&stack, 1.0).unwrap(), 0.5);
    let kids = &h.layers[1].masks;
    assert!(kids
        .iter()
        .any(|m| matches!(m.parent, ParentRef::Mask(p) if p.layer == 1)));
    assert!(kids.iter().any(|m| m.parent == ParentRef::Root));
    assert!(validate_hierarchy(&h).is_empty());

    let orphaned = assign_masks_to_layers(&stack, 1.0).unwrap();
    let v = validate_hierarchy(&orphaned);
    assert_eq!(v.len(), 2);
    assert!(v.iter().all(|x| matches!(x, Violation::Orphan { .. })));

    let a = bits(10, 1, |x, _| x < 6);
    let b = bits(10, 1, |x, _| x >= 4);
    let h = MaskHierarchy::from_layers(10, 1, vec![vec![(a, None), (b, None)]]).unwrap();
    match validate_hierarchy(&h).as_slice() {
        [Violation::ExclusivityOverlap { fraction, .. }] => {
            assert!((fraction - 2.0 / 6.0).abs() < 1e-12)
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn stacks_round_trip_through_disk() {
    let s = random_stack(99);
    let dir = tempfile::tempdir().unwrap();
    save_mask_stack(&s, dir.path()).unwrap();
    let back = load_mask_stack(dir.path()).unwrap();
    assert_eq!(back.width, s.width);
    assert_eq!(back.level_sizes(), s.level_sizes());
    for (a, b) in back.levels.iter().zip(&s.levels) {
        assert_eq!(a.t, b.t);
        assert_eq!(a.masks, b.masks);
    }
    let err = load_mask_stack(&dir.path().join("nope")).unwrap_err();
    assert!(err.to_string().contains("manifest.json"));
    assert!(RawMaskStack::new(4, 4, vec![]).is_err());
    assert!(assign_masks_to_layers(&s, 0.0).is_err());
}
