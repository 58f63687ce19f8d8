use brushnet_core::diffusion::{guided_prediction, timesteps, NoiseSchedule};
use brushnet_core::nn::randn;
use brushnet_core::Result;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tch::{Kind, Tensor};

proptest! {
    #[test]
    fn positive_betas_give_strictly_decreasing_alpha_bar(
        steps in 1usize..2000,
        start in 1e-6f64..0.05,
        extra in 0.0f64..0.2,
    ) {
        let s = NoiseSchedule::linear(steps, start, start + extra).unwrap();
        prop_assert_eq!(s.alpha_bar(0), 1.0);
        for t in 1..=steps {
            prop_assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            prop_assert!(s.alpha_bar(t) > 0.0);
        }
    }

    #[test]
    fn zero_start_is_non_increasing(steps in 2usize..500, end in 0.0f64..0.1) {
        let s = NoiseSchedule::linear(steps, 0.0, end).unwrap();
        prop_assert_eq!(s.alpha_bar(1), 1.0);
        prop_assert!(s.alpha_bars().windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn timestep_grid_walks_down_to_zero(total in 1usize..=1000, frac in 0.0f64..1.0) {
        let steps = 1 + ((total - 1) as f64 * frac) as usize;
        let grid = timesteps(total, steps);
        prop_assert_eq!(grid.len(), steps);
        prop_assert_eq!(grid[0].0, total);
        prop_assert_eq!(grid.last().unwrap().1, 0);
        for (i, &(t, t_prev)) in grid.iter().enumerate() {
            prop_assert!(t_prev < t);
            if i + 1 < grid.len() {
                prop_assert_eq!(t_prev, grid[i + 1].0);
            }
        }
    }

    #[test]
    fn guidance_combines_linearly(seed in any::<u64>(), scale in 0.0f64..12.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = randn(&mut rng, &[1, 4, 4, 4], Kind::Double);
        // Prediction depends on the text so both halves differ.
        let denoiser = |z: &Tensor, _: &[usize], text: &Tensor| -> Result<Tensor> {
            Ok(z * 0.5 + text.sum_dim_intlist([1i64, 2].as_slice(), false, Kind::Double).view([-1, 1, 1, 1]))
        };
        let cond = Tensor::full([1, 2, 3], 0.25, (Kind::Double, tch::Device::Cpu));
        let uncond = Tensor::full([1, 2, 3], -0.1, (Kind::Double, tch::Device::Cpu));
        let got = guided_prediction(&denoiser, &z, 10, &cond, &uncond, scale).unwrap();
        let (u, c) = (&z * 0.5 - 0.6, &z * 0.5 + 1.5);
        let want = &u + (&c - &u) * scale;
        prop_assert!((got - want).abs().max().double_value(&[]) < 1e-12);
    }
}
