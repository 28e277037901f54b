use causal_rdp::discrete_core::{evaluate, mmse_reconstruction, DiscreteSystem};
use causal_rdp::realism::{
    fmd_construct_of, jd_construct_of, joint_law_deviation, marginal_deviation, random_system, SystemAnalysis,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn system() -> impl Strategy<Value = DiscreteSystem> {
    (any::<u64>(), 1usize..=3).prop_map(|(seed, frames)| {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        random_system(&mut rng, frames, 3, 3, 2).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn joint_law_is_normalized(sys in system()) {
        let joint = sys.joint().unwrap();
        prop_assert!((joint.total_mass() - 1.0).abs() <= 1e-12);
        let m = mmse_reconstruction(&joint).unwrap();
        for j in 0..joint.frames() {
            // The conditional mean never does worse than the unconditional one.
            let x = joint.marginal_x(j).unwrap();
            let var = x.second_moment() - x.mean().powi(2);
            prop_assert!(m.distortion[j] <= var + 1e-12);
            prop_assert!(m.distortion[j] >= -1e-12);
        }
    }

    #[test]
    fn marginal_realism_within_factor_two(sys in system()) {
        let a = SystemAnalysis::new(&sys).unwrap();
        let built = fmd_construct_of(&a).unwrap();
        let mse = evaluate(&a.joint, &built.reconstruction).unwrap().mse;
        prop_assert!(marginal_deviation(&a.joint, &built.reconstruction).unwrap() <= 1e-10);
        for j in 0..a.joint.frames() {
            prop_assert!((mse[j] - built.threshold[j]).abs() <= 1e-10);
            prop_assert!(mse[j] <= 2.0 * a.mmse.distortion[j] + 1e-12);
            prop_assert!(mse[j] >= a.mmse.distortion[j] - 1e-12);
        }
    }

    #[test]
    fn joint_realism_is_exact_and_costlier(sys in system()) {
        let a = SystemAnalysis::new(&sys).unwrap();
        let fmd = fmd_construct_of(&a).unwrap();
        let jd = jd_construct_of(&a).unwrap();
        prop_assert!(joint_law_deviation(&a.joint, &jd.reconstruction).unwrap() <= 1e-10);
        let mse = evaluate(&a.joint, &jd.reconstruction).unwrap().mse;
        for j in 0..a.joint.frames() {
            prop_assert!((mse[j] - jd.threshold[j]).abs() <= 1e-10);
            prop_assert!(jd.threshold[j] >= fmd.threshold[j] - 1e-12);
        }
        prop_assert!((jd.threshold[0] - fmd.threshold[0]).abs() <= 1e-12);
    }

    #[test]
    fn shared_randomness_realization_reproduces_outputs(sys in system()) {
        let a = SystemAnalysis::new(&sys).unwrap();
        let jd = jd_construct_of(&a).unwrap();
        let direct = evaluate(&a.joint, &jd.reconstruction).unwrap();
        let realized = jd.reconstruction.shared_randomness_realization();
        let paths = realized.output_paths(&a.joint, &jd.reconstruction).unwrap();
        let mut worst: f64 = 0.0;
        for (path, p) in &direct.output_paths {
            worst = worst.max((paths.get(path).copied().unwrap_or(0.0) - p).abs());
        }
        prop_assert!(worst <= 1e-10);
    }
}
