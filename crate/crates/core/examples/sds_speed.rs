use std::time::Instant;

use latentshield::attacks::{full_semantic_gradient, sds_gradient};
use latentshield::diffusion::{Cond, NoiseSchedule};
use latentshield::models::{Architecture, LatentModel, LdmBundle};
use latentshield::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> latentshield::Result<()> {
    let mut bundle = LdmBundle::init(Architecture::default(), NoiseSchedule::default_linear(), 0)?;
    bundle.meta.trained = true;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::rand_uniform(&[1, 1, 32, 32], 0.0, 1.0, &mut rng);
    let eps = Tensor::randn(bundle.encode(&x).shape(), &mut rng);
    let reps = 200;
    let t0 = Instant::now();
    for _ in 0..reps {
        full_semantic_gradient(&bundle, &x, 400, &eps, &Cond::None)?;
    }
    let full = t0.elapsed().as_secs_f64() / reps as f64;
    let t0 = Instant::now();
    for _ in 0..reps {
        sds_gradient(&bundle, &x, 400, &eps, &Cond::None)?;
    }
    let sds = t0.elapsed().as_secs_f64() / reps as f64;
    println!("full {:.2} ms, sds {:.2} ms, ratio {:.3}", full * 1e3, sds * 1e3, sds / full);
    Ok(())
}
