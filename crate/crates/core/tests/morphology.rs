mod common;

use common::{oracle_dilate, oracle_largest_component, oracle_slice_contours, random_mask};
use coroseg::anatomy::{build_prior, dilate, largest_component, slice_contours, Connectivity};

#[test]
fn largest_component_matches_label_propagation() {
    for seed in 0..200 {
        let m = random_mask(seed);
        for conn in [Connectivity::Six, Connectivity::TwentySix] {
            assert_eq!(largest_component(&m, conn), oracle_largest_component(&m, conn), "seed {seed} {conn:?}");
        }
    }
}

#[test]
fn slice_contours_match_neighbour_scan() {
    for seed in 200..400 {
        let m = random_mask(seed);
        assert_eq!(slice_contours(&m), oracle_slice_contours(&m), "seed {seed}");
    }
}

#[test]
fn dilation_matches_brute_force() {
    for seed in 400..600 {
        let m = random_mask(seed);
        for r in 0..=3 {
            assert_eq!(dilate(&m, r), oracle_dilate(&m, r), "seed {seed} r {r}");
        }
    }
}

#[test]
fn prior_composes_the_three_steps() {
    for seed in 600..650 {
        let m = random_mask(seed);
        let lc = oracle_largest_component(&m, Connectivity::TwentySix);
        let expect = oracle_dilate(&oracle_slice_contours(&lc), 2);
        assert_eq!(build_prior(&m, 2), expect, "seed {seed}");
    }
}

#[test]
fn empty_mask_gives_empty_prior() {
    let m = coroseg::anatomy::BinaryMask3::zeros([4, 5, 6], [1.0; 3]);
    assert_eq!(build_prior(&m, 3).count(), 0);
}
