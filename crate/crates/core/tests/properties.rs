// SPDX-License-Identifier: Apache-2.0
//! Randomized checks of the repair algebra and of schedule soundness.

mod common;

use proptest::prelude::*;

use common::*;

fn case_and_domain() -> impl Strategy<Value = (usize, usize, u64)> {
    (0..CASES.len(), 1usize..=8, any::<u64>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn repair_tag_updates_every_prefix((k, n, seed) in case_and_domain()) {
        let cert = certificate(&CASES[k]);
        let d = Domain::random(&cert, n, &mut rng(seed));
        prop_assert!(tag_update_holds(&cert, &CASES[k], &d).is_ok(), "{:?}", tag_update_holds(&cert, &CASES[k], &d));
    }

    #[test]
    fn inverse_recovers_the_constant(k in 0..CASES.len(), seed in any::<u64>()) {
        let cert = certificate(&CASES[k]);
        let r = round_trip_holds(&cert, &mut rng(seed));
        prop_assert!(r.is_ok(), "{:?}", r);
    }

    #[test]
    fn recurrence_matches_the_explicit_form((k, n, seed) in case_and_domain()) {
        let cert = certificate(&CASES[k]);
        let d = Domain::random(&cert, n, &mut rng(seed));
        let r = recurrent_matches_explicit(&cert, &CASES[k], &d);
        prop_assert!(r.is_ok(), "{:?}", r);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn schedules_preserve_outputs_or_change_nothing(seed in any::<u64>()) {
        let mut g = rng(seed);
        let (p, cols) = fuzz_program(&mut g);
        let script = fuzz_script(cols, &mut g);
        let r = check_schedule(&p, &script, seed, &mut FuzzTally::default());
        prop_assert!(r.is_ok(), "{}\n{}", script.join("\n"), r.unwrap_err());
    }
}
