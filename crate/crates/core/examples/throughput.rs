//! Measures training steps per second for a few configurations.

use std::time::Instant;

use l2r::baseline::{BaselineConfig, LstmBaseline};
use l2r::corpus::fallback_corpus;
use l2r::kernels::OpKind;
use l2r::network::{NetworkConfig, PlasticNetwork};
use l2r::trainer::{SegmentModel, TrainConfig, Trainer};

fn time<M: SegmentModel>(label: &str, mut trainer: Trainer<M>, segments: usize) {
    let stream = fallback_corpus();
    let clock = Instant::now();
    for _ in 0..segments {
        trainer.train_segment(&stream).unwrap();
    }
    let secs = clock.elapsed().as_secs_f64();
    let seg = trainer.config().segment_len;
    println!("{label}: {:.1} steps/s", (segments * seg) as f64 / secs);
}

fn main() {
    let cfg = TrainConfig::default();
    for (h_op, w_op, d) in [
        (OpKind::Gated, OpKind::Gated, 6),
        (OpKind::Gated, OpKind::Mlp, 6),
        (OpKind::Gated, OpKind::Gated, 14),
        (OpKind::Lstm, OpKind::Lstm, 6),
    ] {
        let net = PlasticNetwork::new(NetworkConfig {
            neuron_dim: d,
            synapse_dim: d,
            h_op,
            w_op,
            ..NetworkConfig::default()
        })
        .unwrap();
        let meta = net.init_meta(1);
        let state = net.init_state(1);
        time(
            &format!("{h_op}/{w_op} d={d}"),
            Trainer::new(net, meta, state, cfg.clone()).unwrap(),
            100,
        );
    }
    for units in [16, 128] {
        let net = LstmBaseline::new(BaselineConfig { units }).unwrap();
        let params = net.init_params(1);
        let state = net.zero_state();
        time(
            &format!("lstm-{units}"),
            Trainer::new(net, params, state, cfg.clone()).unwrap(),
            100,
        );
    }
}
