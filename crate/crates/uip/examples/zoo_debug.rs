// scratch: criterion-4 conv pipeline tv sweep
use uip::data::*;
use uip::inversion::*;
use uip::seeds::*;
use uip::train::*;
use uip::unlearn::*;
use uip::nn::ArchSpec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() {
    for tvw in [0.0, 1e-4, 3e-4, 1e-3] {
        let t0 = Instant::now();
        let mut pass = 0;
        let mut margins = Vec::new();
        for seed in 0..10u64 {
            let ds = synth_dataset(&SynthKind::PatternImages { shape: [3,16,16] }, 150, 4, derive_seed(seed, 21)).unwrap();
            let (d0, du) = split_pretrain_private(&ds, derive_seed(seed, 22)).unwrap();
            let arch = ArchSpec::conv_net([3,16,16], &[6], 3, 2, &[], 4).unwrap();
            let pre = TrainConfig::new(0.1, 16, 40, derive_seed(seed, 23));
            let ft = TrainConfig::finetune_default(du.len(), derive_seed(seed, 24));
            let (m0, m) = pretrain_finetune(&arch, &d0, &du, &pre, &ft).unwrap();
            let idx = seed as usize % du.len();
            let removed = du.subset(&[idx]).unwrap();
            let ucfg = ApproxUnlearnConfig::new(ft.learning_rate, ft.batch_size, ft.epochs);
            let (mu, _) = approx_unlearn(&m, &m0, &removed, &ucfg).unwrap();
            let est = estimate_gradient(&m, &mu, SignConvention::ReconstructionDiff).unwrap();
            let (x, y) = removed.sample(0).unwrap();
            let mut cfg = InversionConfig::new(LabelMode::Known(y), 2000, derive_seed(seed, 25));
            cfg.tv_weight = tvw;
            let res = invert(&m, &est, &cfg, Some(std::slice::from_ref(&x))).unwrap();
            let psnr = res.slots[0].psnr_db.unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 26));
            let noise: Vec<f64> = (0..x.len()).map(|_| rng.random::<f64>()).collect();
            let base = metric_psnr(&x, &uip::Tensor::new(x.shape().to_vec(), noise).unwrap()).unwrap();
            let margin = psnr - base;
            margins.push(margin);
            if margin >= 6.0 { pass += 1; }
        }
        println!("tvw={tvw}: pass {pass}/10, margins {:?} in {:?}",
            margins.iter().map(|m| (m * 10.0).round() / 10.0).collect::<Vec<_>>(), t0.elapsed());
    }
}
