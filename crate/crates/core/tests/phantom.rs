use coroseg::anatomy::{build_prior, dilate};
use coroseg::phantom::{case_seed, generate, generate_with_centerlines, make_dataset, Layout, PhantomSpec};
use std::collections::HashSet;

#[test]
fn same_seed_is_bit_identical_and_seeds_differ() {
    let spec = PhantomSpec::for_dims([32; 3], 17);
    let a = generate(&spec).unwrap();
    let b = generate(&spec).unwrap();
    assert_eq!(a.vessel, b.vessel);
    assert_eq!(a.myo, b.myo);
    assert!(a.intensity.data().iter().zip(b.intensity.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    let masks: HashSet<Vec<u8>> = (0..6)
        .map(|i| generate(&PhantomSpec::for_dims([32; 3], case_seed(3, i))).unwrap().vessel.data().to_vec())
        .collect();
    assert_eq!(masks.len(), 6);
}

#[test]
fn straight_tube_matches_cylinder_scan() {
    for (center, radius) in [([7.0, 9.0], 1.0), ([8.3, 6.6], 1.0), ([5.5, 10.0], 2.4)] {
        let spec = PhantomSpec {
            noise: 0.0,
            layout: Layout::StraightTube { center, radius },
            ..PhantomSpec::for_dims([16; 3], 0)
        };
        let rec = generate(&spec).unwrap();
        let mut expected = 0;
        for z in 0..16 {
            for y in 0..16 {
                let d2 = (z as f64 - center[0]).powi(2) + (y as f64 - center[1]).powi(2);
                if d2 <= radius * radius {
                    expected += 16;
                }
            }
        }
        assert_eq!(rec.vessel.count(), expected, "{center:?} r {radius}");
    }
}

#[test]
fn default_cases_are_sparse_and_hug_the_shell() {
    let data = make_dataset(12, &PhantomSpec::for_dims([48; 3], 0), 2024).unwrap();
    let ids: HashSet<&str> = data.iter().map(|(r, _)| r.id.as_str()).collect();
    assert_eq!(ids.len(), 12);
    for (rec, _) in &data {
        let frac = rec.vessel.count() as f64 / rec.vessel.len() as f64;
        assert!((0.0005..=0.03).contains(&frac), "{}: vessel fraction {frac}", rec.id);
        // Tubes of radius <= 1.6 sit half sunk into the wall, so every
        // vessel voxel is within 4 voxels of the myocardium.
        assert!(rec.vessel.is_subset_of(&dilate(&rec.myo, 4)), "{}", rec.id);
    }
}

#[test]
fn prior_covers_the_centerlines() {
    let (mut inside, mut total) = (0usize, 0usize);
    for i in 0..10 {
        let (rec, centerline) = generate_with_centerlines(&PhantomSpec::for_dims([48; 3], case_seed(7, i))).unwrap();
        let prior = build_prior(&rec.myo, 2);
        let dims = rec.vessel.dims();
        for p in centerline {
            let q = p.map(|v| v.round());
            if (0..3).any(|a| q[a] < 0.0 || q[a] >= dims[a] as f64) {
                continue;
            }
            total += 1;
            inside += prior.get(q.map(|v| v as usize)) as usize;
        }
    }
    let coverage = inside as f64 / total as f64;
    assert!(coverage >= 0.99, "centerline coverage {coverage}");
}

#[test]
fn rejects_bad_specs() {
    assert!(generate(&PhantomSpec::for_dims([16, 24, 16], 0)).is_err());
    let inverted = PhantomSpec {
        mu_vessel: 0.2,
        ..PhantomSpec::for_dims([16; 3], 0)
    };
    assert!(generate(&inverted).is_err());
    assert!(make_dataset(9, &PhantomSpec::for_dims([16; 3], 0), 0).is_err());
}
