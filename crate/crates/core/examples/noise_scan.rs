use capi::network::NetworkConfig;
use capi::probes::{accuracy, knn_predict, standardize, FeatureBank, Metric, Split};
use capi::trainer::{TrainConfig, TrainState};
use capi::workbench::{
    synthetic_patch_bank, synthetic_pixel_bank, LabelKind, SyntheticDataset, SyntheticSpec,
};

fn knn(train: &FeatureBank, test: &FeatureBank) -> f64 {
    let (s, _) =
        standardize(&FeatureBank::concat(&[train.clone(), test.clone()]).unwrap()).unwrap();
    let (xt, yt) = s.subset(Split::Train);
    let (xs, ys) = s.subset(Split::Test);
    accuracy(&knn_predict(&xt, &yt, &xs, 10, Metric::L2).unwrap(), &ys)
}

fn main() {
    let net = NetworkConfig::toy();
    let fresh = TrainState::new(&net, &TrainConfig::toy(), 0).unwrap();
    for noise in [1.0, 2.0, 3.0, 4.0] {
        let spec = SyntheticSpec {
            noise,
            ..SyntheticSpec::default()
        };
        let a = SyntheticDataset::new(spec.clone(), 200, 1000).unwrap();
        let b = SyntheticDataset::new(spec, 100, 2000).unwrap();
        let px = knn(
            &synthetic_pixel_bank(&a, 0..200, Split::Train).unwrap(),
            &synthetic_pixel_bank(&b, 0..100, Split::Test).unwrap(),
        );
        let rn = knn(
            &synthetic_patch_bank(
                &a,
                0..200,
                &fresh.teacher,
                &net,
                Split::Train,
                LabelKind::Patch,
            )
            .unwrap(),
            &synthetic_patch_bank(
                &b,
                0..100,
                &fresh.teacher,
                &net,
                Split::Test,
                LabelKind::Patch,
            )
            .unwrap(),
        );
        println!("noise {noise}: pixels {px:.3} random-net {rn:.3}");
    }
}
