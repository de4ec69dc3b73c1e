use bg_triplex::data::{context_window, synth_dataset, SpotRecord};
use proptest::prelude::*;

proptest! {
    #[test]
    fn window_matches_brute_force(
        cells in prop::collection::btree_set((0usize..6, 0usize..6), 1..20),
        pick in any::<prop::sample::Index>(),
        half in 0usize..3,
    ) {
        let spots: Vec<SpotRecord> = cells
            .iter()
            .enumerate()
            .map(|(i, &(r, c))| SpotRecord::new(format!("s{i}"), r, c, 0.0, 0.0))
            .collect();
        let center = pick.index(spots.len());
        let d = 2 * half + 1;
        let w = context_window(&spots, center, d).unwrap();
        let (cr, cc) = spots[center].grid();
        for r in 0..d {
            for c in 0..d {
                let (gr, gc) = (cr as isize + r as isize - half as isize, cc as isize + c as isize - half as isize);
                let want = spots.iter().position(|s| s.array_row as isize == gr && s.array_col as isize == gc);
                prop_assert_eq!(w.member(r, c), want);
            }
        }
        prop_assert_eq!(w.member(half, half), Some(center));
    }
}

#[test]
fn duplicate_cells_are_rejected() {
    let spots = vec![SpotRecord::new("a", 1, 1, 0.0, 0.0), SpotRecord::new("b", 1, 1, 0.0, 0.0)];
    assert!(context_window(&spots, 0, 3).is_err());
}

#[test]
fn synthetic_counts_golden() {
    let (ds, _) = synth_dataset(3, 3, 8, 0.1, 21).unwrap();
    let total: f64 = ds.expr.values.data().iter().sum();
    assert_eq!(total, 1978.0);
    assert_eq!(ds.expr.values.row(0), &[13.0, 33.0, 13.0, 10.0, 9.0, 48.0, 45.0, 47.0]);
    assert_eq!(ds.spots[4].spot_id, "s1_1");
}
