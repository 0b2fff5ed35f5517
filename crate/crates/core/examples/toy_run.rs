use capi::network::NetworkConfig;
use capi::trainer::{checkpoint, pretrain, MemorySink, TrainConfig, TrainState};
use capi::workbench::{SyntheticDataset, SyntheticSpec};

fn main() {
    env_logger::init();
    let steps: usize = std::env::args()
        .nth(1)
        .map(|s| s.parse().unwrap())
        .unwrap_or(200);
    let out = std::env::args().nth(2).unwrap_or_else(|| "/tmp/toy".into());
    let net = NetworkConfig::toy();
    let cfg = TrainConfig::toy();
    let data = SyntheticDataset::new(SyntheticSpec::default(), 8192, 1).unwrap();
    let state = TrainState::new(&net, &cfg, 0).unwrap();
    let t = std::time::Instant::now();
    let mut sink = MemorySink::default();
    let end = pretrain(state, &net, &cfg, &cfg.schedule(steps), &data, &mut sink, 0).unwrap();
    let el = t.elapsed().as_secs_f64();
    checkpoint::save(
        std::path::Path::new(&format!("{out}.safetensors")),
        &end,
        &net,
        &cfg,
    )
    .unwrap();
    let log: String = sink
        .metrics
        .iter()
        .map(|m| serde_json::to_string(m).unwrap() + "\n")
        .collect();
    std::fs::write(format!("{out}.jsonl"), log).unwrap();
    for m in sink.metrics.iter().step_by((steps / 20).max(1)) {
        println!(
            "{} mim {:.4} cl {:.4} ent {:.3} mi {:.4} mis {:.4} lr {:.2e}",
            m.step,
            m.mim_loss,
            m.cluster_loss,
            m.target_entropy,
            m.position_mi,
            m.position_mi_soft,
            m.lr
        );
    }
    let mx = sink
        .metrics
        .iter()
        .map(|m| m.position_mi)
        .fold(0.0, f64::max);
    println!("max mi {mx:.4}; {:.1} ms/step", el * 1000.0 / steps as f64);
}
