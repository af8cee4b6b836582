//! Builds a calibrated linear schedule, noises a sample in closed form and
//! evaluates the Gaussian posterior used by ancestral sampling.
//!
//! ```text
//! cargo run --release --example schedule -- [num_steps] [sigma_max]
//! ```

use maddpm::sampler::gaussian_like;
use maddpm::{make_linear_schedule, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> maddpm::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let n: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1000);
    let sigma_max: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(8.0);

    let s = make_linear_schedule(n, sigma_max)?;
    println!("β from {:.2e} to {:.6e} over {n} steps", s.beta_start(), s.beta_end());
    for t in [1, n / 4, n / 2, 3 * n / 4, n] {
        let t = t.max(1);
        println!("t = {t:5}: ᾱ = {:.6e}, σ = {:.4}", s.alpha_bar_at(t), s.sigma_at(t));
    }

    let x0 = Tensor::filled(1, 2, 2, 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let t = s.nearest_index(sigma_max / 4.0);
    let xt = s.forward_sample(&x0, t, &gaussian_like(&x0, &mut rng))?;
    let post = s.posterior_params(&xt, &x0, t)?;
    println!(
        "step {t} (σ ≈ {:.3}): x_t = {:?}, posterior mean = {:?}, variance = {:.3e}",
        s.sigma_at(t),
        xt.data(),
        post.mean.data(),
        post.variance
    );
    Ok(())
}
