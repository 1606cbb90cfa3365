use boxcaseg::sampler::{plan_epoch, SamplerConfig, SamplingMode};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn fixed_ratio_epochs_keep_the_contract(
        a in 1usize..12,
        b in 1usize..10,
        extra_weak in 0usize..40,
        extra_salient in 0usize..40,
        seed in any::<u64>(),
        epoch in 0u64..1000,
    ) {
        let (n_weak, n_salient) = (a + extra_weak, b + extra_salient);
        let cfg = SamplerConfig { weak_per_batch: a, salient_per_batch: b, mode: SamplingMode::FixedRatio, seed };
        let plan = plan_epoch(n_weak, n_salient, &cfg, epoch).unwrap();
        prop_assert_eq!(plan.batches.len(), n_salient.div_ceil(b));
        let mut seen = vec![0usize; n_salient];
        for (i, batch) in plan.batches.iter().enumerate() {
            prop_assert_eq!(batch.weak.len(), a);
            prop_assert_eq!(batch.salient.len(), b);
            prop_assert!(batch.weak.iter().all(|&w| w < n_weak));
            let last = i + 1 == plan.batches.len();
            for (&s, &pad) in batch.salient.iter().zip(&batch.salient_pad) {
                prop_assert!(!pad || last, "padding outside the final batch");
                if !pad {
                    seen[s] += 1;
                }
            }
        }
        prop_assert!(seen.iter().all(|&n| n == 1));
        prop_assert_eq!(plan_epoch(n_weak, n_salient, &cfg, epoch).unwrap(), plan);
    }

    #[test]
    fn random_union_batches_are_full(
        a in 1usize..12,
        b in 1usize..10,
        extra in 0usize..30,
        seed in any::<u64>(),
    ) {
        let cfg = SamplerConfig { weak_per_batch: a, salient_per_batch: b, mode: SamplingMode::RandomUnion, seed };
        let plan = plan_epoch(a + extra, b + extra, &cfg, 0).unwrap();
        for batch in &plan.batches {
            prop_assert_eq!(batch.len(), a + b);
        }
    }
}
