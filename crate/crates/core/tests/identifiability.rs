use lcdr_core::synthlab::{alignment_score, generate, SynthConfig};
use lcdr_core::trainer::{extract_z, train_with, Branches, StageOneData};
use lcdr_core::TrainConfig;

fn ivae_r2(noise: f64, seed: u64) -> f64 {
    let cfg = SynthConfig { num_users: 1000, num_items: 200, latent_dim_true: 2, proxy_noise: noise, seed, ..SynthConfig::default() };
    let (d, truth) = generate(&cfg).unwrap();
    let data = StageOneData::from_dataset(&d);
    let tc = TrainConfig { latent_dim: 2, lr: 3e-3, batch_size: 32, epochs: 100, patience: 1000, seed, ..TrainConfig::default() };
    let out = train_with(&data, &tc, Branches::IvaeOnly, &mut |_, _, _| {}).unwrap();
    let z = extract_z(out.ivae.as_ref().unwrap(), &data.exposure, &data.proxies).unwrap();
    alignment_score(&z, &truth.z_true).unwrap()
}

/// Mean recovery over seeds should not improve as proxies get noisier; one
/// inversion of at most 0.02 is tolerated.
#[test]
fn recovery_degrades_with_proxy_noise() {
    let levels = [0.0, 0.25, 0.5, 0.75, 1.0];
    let means: Vec<f64> = levels
        .iter()
        .map(|&rho| {
            let per_seed: Vec<f64> = (0..5).map(|s| ivae_r2(rho, s)).collect();
            eprintln!("noise {rho}: {per_seed:?}");
            per_seed.iter().sum::<f64>() / 5.0
        })
        .collect();
    eprintln!("mean R² by noise level {levels:?}: {means:?}");
    let mut inversions = 0;
    for w in means.windows(2) {
        if w[1] > w[0] {
            inversions += 1;
            assert!(w[1] - w[0] <= 0.02, "R² rose by {} between noise levels", w[1] - w[0]);
        }
    }
    assert!(inversions <= 1, "{inversions} inversions in {means:?}");
    assert!(means[0] > means[4]);
}
