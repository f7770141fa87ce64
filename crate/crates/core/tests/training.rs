use coroseg::io::history_csv;
use coroseg::nn::checkpoint;
use coroseg::nn::NetworkConfig;
use coroseg::phantom::{generate, make_dataset, PhantomSpec, Split};
use coroseg::train::{train, Case, Sample, TrainConfig, Trainer};

fn tiny_config(seed: u64) -> TrainConfig {
    TrainConfig {
        network: NetworkConfig {
            base_width: 4,
            scales: 2,
            ..NetworkConfig::default()
        },
        epochs: 3,
        patience: 10,
        patch: [16; 3],
        overlap: 4,
        seed,
        ..TrainConfig::default()
    }
}

fn cases(n: usize, seed: u64) -> (Vec<Case>, Vec<Case>) {
    let data = make_dataset(n, &PhantomSpec::for_dims([32; 3], 0), seed).unwrap();
    let (mut tr, mut va) = (Vec::new(), Vec::new());
    for (rec, split) in &data {
        let c = Case::from_record(rec, 2).unwrap();
        match split {
            Split::Train => tr.push(c),
            _ => va.push(c),
        }
    }
    (tr, va)
}

#[test]
fn same_seed_gives_identical_history_and_weights() {
    let (tr, va) = cases(10, 4);
    let run = || {
        let out = train(&tiny_config(9), &tr, &va, |_| {}).unwrap();
        (history_csv(&out.history).unwrap(), checkpoint::to_bytes(&out.best).unwrap())
    };
    let (h1, c1) = run();
    let (h2, c2) = run();
    assert_eq!(h1, h2);
    assert!(c1 == c2, "checkpoints differ");
    let (h3, _) = {
        let out = train(&tiny_config(10), &tr, &va, |_| {}).unwrap();
        (history_csv(&out.history).unwrap(), ())
    };
    assert_ne!(h1, h3, "a different seed should change the run");
}

#[test]
fn overfits_a_single_phantom() {
    let rec = generate(&PhantomSpec::for_dims([32; 3], 21)).unwrap();
    let case = Case::from_record(&rec, 2).unwrap();
    let sample = Sample::crop(&case, [0; 3], [32; 3]).unwrap();
    let mut cfg = tiny_config(1);
    cfg.patch = [32; 3];
    let mut t = Trainer::new(cfg).unwrap();
    let mut loss = f64::INFINITY;
    for _ in 0..200 {
        loss = t.step(std::slice::from_ref(&sample), 2e-3).unwrap();
    }
    eprintln!("final loss {loss}");
    assert!(loss < 0.2, "loss after 200 steps: {loss}");
}

#[test]
fn stops_after_patience_epochs_without_improvement() {
    let (tr, va) = cases(10, 5);
    let mut cfg = tiny_config(2);
    cfg.epochs = 20;
    cfg.patience = 1;
    let out = train(&cfg, &tr, &va, |_| {}).unwrap();
    let dsc: Vec<f64> = out.history.iter().map(|r| r.val_dsc).collect();
    let best = dsc[out.best_epoch - 1];
    // The best epoch is the first one reaching the maximum.
    assert!(dsc[..out.best_epoch - 1].iter().all(|&d| d < best));
    assert!(dsc.iter().all(|&d| d <= best));
    assert!(out.stopped_early, "{dsc:?}");
    // Every epoch either strictly improves on all earlier ones or is the
    // one that exhausts the patience and ends the run.
    let last = dsc.len() - 1;
    for e in 1..last {
        assert!(dsc[e] > dsc[..e].iter().copied().fold(f64::NEG_INFINITY, f64::max), "{dsc:?}");
    }
    assert!(dsc[last] <= dsc[..last].iter().copied().fold(f64::NEG_INFINITY, f64::max));
}

#[test]
fn rejects_patch_larger_than_volume() {
    let (tr, va) = cases(10, 6);
    let mut cfg = tiny_config(0);
    cfg.patch = [48; 3];
    assert!(train(&cfg, &tr, &va, |_| {}).is_err());
}
