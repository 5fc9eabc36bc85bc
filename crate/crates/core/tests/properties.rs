use proptest::prelude::*;
use vidanim::conditioning::tokenize;
use vidanim::config::ScheduleKind;
use vidanim::dataset::feasible_strides;
use vidanim::schedule::NoiseSchedule;
use vidanim::Config;

proptest! {
    #[test]
    fn alpha_bar_is_a_decreasing_product(t in 1usize..400, start in 1e-5f64..1e-2, span in 0.0f64..0.2) {
        let s = NoiseSchedule::new(t, start, start + span, ScheduleKind::Linear).unwrap();
        let mut prod = 1.0;
        for i in 0..t {
            prod *= 1.0 - s.beta()[i];
            prop_assert!((s.alpha_bar()[i] - prod).abs() <= 1e-12);
            prop_assert!(s.alpha_bar()[i] > 0.0 && s.alpha_bar()[i] < 1.0);
            if i > 0 {
                prop_assert!(s.snr(i) < s.snr(i - 1));
            }
        }
    }

    #[test]
    fn config_render_round_trips(
        size_pow in 3u32..7,
        timesteps in 1usize..3000,
        beta in 1e-5f64..0.5,
        guidance in 0.0f64..20.0,
        eta in 0.0f64..=1.0,
        drop in 0.0f64..0.99,
    ) {
        let mut c = Config::default();
        c.image_size = 1 << size_pow;
        c.latent_factor = 4;
        c.patch_size = 4;
        c.timesteps = timesteps;
        c.sample_steps = timesteps.min(50);
        c.beta_start = beta / 2.0;
        c.beta_end = beta;
        c.guidance = guidance;
        c.eta = eta;
        c.cond_drop_prob = drop;
        prop_assume!(c.validate().is_ok());
        let back = Config::parse_str(&c.render()).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn config_parser_never_panics(text in "[a-z_ =#0-9.\n-]{0,200}") {
        let _ = Config::parse_str(&text);
    }

    #[test]
    fn tokens_stay_in_vocabulary(prompt in "[a-zA-Z ]{0,60}", vocab in 1usize..5000) {
        let ids = tokenize(&prompt, vocab);
        prop_assert_eq!(ids.len(), prompt.split_whitespace().count());
        prop_assert!(ids.iter().all(|&i| (i as usize) < vocab));
    }

    #[test]
    fn feasible_strides_fit(native in 1usize..200, len in 1usize..40, max_stride in 1usize..10) {
        for s in feasible_strides(native, len, max_stride) {
            prop_assert!((len - 1) * s < native);
            prop_assert!((1..=max_stride).contains(&s));
        }
    }
}
