use quest_core::diffusion::teacher::denoising_loss;
use quest_core::diffusion::{
    heldout_corruptions, make_schedule, train_teacher, Dataset, DatasetKind, TeacherConfig,
    UNetConfig,
};
use quest_core::{Error, Tensor};

fn quick(epochs: usize) -> TeacherConfig {
    TeacherConfig {
        epochs,
        max_epochs: epochs,
        threshold: f64::INFINITY,
        ..TeacherConfig::default()
    }
}

#[test]
fn training_is_deterministic_given_the_seed() {
    let schedule = make_schedule(20, 1e-4, 0.1).unwrap();
    let data = Dataset::generate(DatasetKind::Blobs, 48, 1, 16, 1).unwrap();
    let (a, ra) = train_teacher(&data, UNetConfig::default(), &schedule, &quick(2), 9).unwrap();
    let (b, rb) = train_teacher(&data, UNetConfig::default(), &schedule, &quick(2), 9).unwrap();
    assert!(a.params.bit_eq(&b.params));
    assert_eq!(ra, rb);
    let (c, _) = train_teacher(&data, UNetConfig::default(), &schedule, &quick(2), 10).unwrap();
    assert!(!a.params.bit_eq(&c.params));
}

#[test]
fn constant_dataset_reaches_the_noise_floor() {
    // x_0 is known, so ε = (x_t − √ᾱ c) / √(1 − ᾱ) exactly and the floor is 0
    let schedule = make_schedule(100, 1e-4, 0.1).unwrap();
    let data = Dataset::generate(DatasetKind::Constant { value: 0.5 }, 320, 1, 16, 0).unwrap();
    let (model, report) = train_teacher(
        &data,
        UNetConfig::default(),
        &schedule,
        &TeacherConfig::default(),
        0,
    )
    .unwrap();
    assert!(report.heldout_loss < 0.05, "{}", report.heldout_loss);
    let c = heldout_corruptions(&data, &schedule, 0);
    assert_eq!(denoising_loss(&model, &c).unwrap(), report.heldout_loss);
}

#[test]
fn empty_dataset_is_an_error() {
    let schedule = make_schedule(10, 1e-4, 0.1).unwrap();
    let empty = Dataset {
        images: Tensor::zeros(&[0, 1, 16, 16]),
    };
    assert!(matches!(
        train_teacher(&empty, UNetConfig::default(), &schedule, &quick(1), 0),
        Err(Error::Empty(_))
    ));
}

#[test]
fn non_convergence_carries_the_final_loss() {
    let schedule = make_schedule(10, 1e-4, 0.1).unwrap();
    let data = Dataset::generate(DatasetKind::Blobs, 16, 1, 16, 0).unwrap();
    let cfg = TeacherConfig {
        epochs: 1,
        max_epochs: 2,
        threshold: 1e-9,
        ..TeacherConfig::default()
    };
    match train_teacher(&data, UNetConfig::default(), &schedule, &cfg, 0) {
        Err(Error::NonConvergence {
            loss,
            epochs,
            threshold,
        }) => {
            assert!(loss.is_finite() && loss > 1e-9);
            assert_eq!((epochs, threshold), (2, 1e-9));
        }
        other => panic!("expected non-convergence, got {:?}", other.map(|r| r.1)),
    }
}
