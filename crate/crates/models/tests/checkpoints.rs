use rainsense_models::{Arch, Model, ModelError, Normalizer};
use rainsense_nn::Tensor;

fn norm() -> Normalizer {
    Normalizer {
        pdp_floor_db: -116.07,
        pdp_mean: -80.123456789,
        pdp_std: 11.5,
        rss_mean: -40.1,
        rss_std: 1.9,
    }
}

#[test]
fn save_load_roundtrip_for_every_architecture() {
    let dir = std::env::temp_dir().join(format!("rainsense-ck-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    for arch in Arch::ALL {
        let mut m = Model::new(arch, "tiny", 21, norm()).unwrap();
        // perturb a buffer so running statistics are part of the check
        let bufs: Vec<String> = m
            .store
            .named_buffers()
            .map(|(n, _)| n.to_string())
            .collect();
        if let Some(name) = bufs.first() {
            let id = m.store.buffer_id(name).unwrap();
            m.store.buffer_mut(id).data_mut()[0] = 0.375;
        }
        let path = dir.join(format!("{}.ckpt", arch.name()));
        m.save(&path).unwrap();
        let mut back = Model::load(&path).unwrap();
        assert_eq!(back.arch, arch);
        assert_eq!(back.normalizer, norm());
        let a: Vec<_> = m
            .store
            .named_params()
            .chain(m.store.named_buffers())
            .collect();
        let b: Vec<_> = back
            .store
            .named_params()
            .chain(back.store.named_buffers())
            .collect();
        assert_eq!(a, b);

        let shape: Vec<usize> = match arch {
            Arch::RainGauge | Arch::Single => vec![2, 12, 4],
            Arch::Cnn => vec![2, 1, 12, 4],
            Arch::Rss => vec![2, 1, 4],
        };
        let n: usize = shape.iter().product();
        let x = Tensor::new(&shape, (0..n).map(|i| (i as f64).sin()).collect()).unwrap();
        assert_eq!(m.logits(&x).unwrap(), back.logits(&x).unwrap());

        let again = dir.join("again.ckpt");
        back.save(&again).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&again).unwrap()
        );
    }
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn metadata_problems_are_reported() {
    let m = Model::new(Arch::Rss, "tiny", 1, norm()).unwrap();
    let mut ck = m.to_checkpoint();
    ck.metadata = ck.metadata.replace("arch=rss-net", "arch=lstm");
    assert!(matches!(
        Model::from_checkpoint(&ck),
        Err(ModelError::Checkpoint(_))
    ));

    let mut ck = m.to_checkpoint();
    ck.metadata = ck.metadata.replace("preset=tiny", "preset=desk");
    assert!(Model::from_checkpoint(&ck).is_err());

    let mut ck = m.to_checkpoint();
    ck.params.pop();
    assert!(matches!(
        Model::from_checkpoint(&ck),
        Err(ModelError::Checkpoint(_))
    ));

    let mut ck = m.to_checkpoint();
    ck.metadata = ck.metadata.replace("pdp_std=", "pdp_sd=");
    assert!(matches!(
        Model::from_checkpoint(&ck),
        Err(ModelError::Checkpoint(_))
    ));
}
