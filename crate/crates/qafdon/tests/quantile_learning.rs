//! Trains the operator model on targets with a known conditional
//! distribution and checks that the learned lower head sits at the α/2
//! tail: on held-out data the fraction of targets below the lower bound
//! must approach α/2.

use qafdon::adam::AdamParams;
use qafdon::fed::{self, FedConfig};
use qafdon::model::{ModelConfig, PaddedInput, QafModel, Triplet};
use rand::Rng;

fn uniform_target_triplets(n: usize, m: usize, seed: u64) -> Vec<Triplet> {
    let mut rng = qafdon::rng::stream(seed, &[7]);
    (0..n)
        .map(|_| {
            let valid = rng.random_range(8..=m);
            let observed: Vec<f64> = (0..valid).map(|_| rng.random_range(0.6..1.1)).collect();
            Triplet {
                input: PaddedInput::from_observed(&observed, m).unwrap(),
                t: rng.random_range(2.5..8.0),
                // Known conditional law: G ~ Uniform[0.3, 1.1] regardless of
                // the input, so the α/2 quantile is a constant.
                target: rng.random_range(0.3..1.1),
            }
        })
        .collect()
}

#[test]
fn learned_lower_head_hits_the_target_tail_fraction() {
    let alpha = 0.2;
    let config = ModelConfig {
        m: 24,
        d: 6,
        p: 4,
        s: 4,
        fourier_m: 6,
        fourier_sigma: 2.0,
        branch_hidden: vec![8],
        trunk_hidden: vec![8],
        head_hidden: vec![],
        alpha,
        t_max_input: 2.2,
        horizon: 8.5,
        mask_padding: false,
    };

    let train = uniform_target_triplets(3000, 24, 501);
    let held_out = uniform_target_triplets(2500, 24, 502);

    let dataset = qafdon::data::TripletDataset {
        meta: qafdon::data::DatasetMeta {
            bus_id: 1,
            seed: 501,
            m: 24,
            n_loc: 1,
            dt_obs: 0.4,
            grid_step: 0.01,
            t_max_input: 2.2,
            horizon: 8.5,
        },
        traj_ids: (0..train.len() as u32).collect(),
        triplets: train,
    };
    let fed_cfg = FedConfig {
        n_clients: 1,
        k_local: 1000,
        total_rounds: 600,
        batch_size: 64,
        adam: AdamParams {
            lr: 5e-3,
            ..AdamParams::default()
        },
        seed: 501,
    };
    let model: QafModel = fed::pretrain(&config, &fed_cfg, vec![dataset]).unwrap().model;

    let below = held_out
        .iter()
        .filter(|tr| {
            let (lo, _) = model.predict_quantiles(&tr.input, tr.t).unwrap();
            tr.target < lo
        })
        .count();
    let fraction = below as f64 / held_out.len() as f64;
    let target = alpha / 2.0;
    assert!(
        (fraction - target).abs() <= 0.05,
        "fraction below the learned lower bound is {fraction}, want {target} ± 0.05"
    );
}
