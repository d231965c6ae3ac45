mod common;

use std::sync::Arc;

use common::trained_toy;
use recall_lab::causal::{trace_example, TraceConfig};
use recall_lab::engine::wire::{spawn_server, RemoteBackend};
use recall_lab::engine::{Backend, Engine};
use recall_lab::extraction::extraction_profile;
use recall_lab::knockout::{knockout_curve, Partition};
use recall_lab::runtime::{Arch, KnockoutMode};

const WIRE_TOL: f64 = 1e-5;

#[test]
fn experiments_agree_over_the_wire() {
    for arch in [Arch::DecoderOnly, Arch::EncoderDecoder] {
        let toy = trained_toy(arch, 11);
        let native: Arc<dyn Backend> = Arc::new(toy.backend());
        let server = spawn_server(native.clone(), "127.0.0.1:0").unwrap();
        let remote = RemoteBackend::connect(&server.addr().to_string()).unwrap();
        let examples: Vec<_> = toy.examples().into_iter().take(6).collect();

        let a = extraction_profile(native.as_ref(), &examples).unwrap();
        let b = extraction_profile(&remote, &examples).unwrap();
        assert_eq!(a.per_example, b.per_example, "{arch:?}");

        let (ne, re) = (Engine::new(native.clone()), Engine::new(remote));
        let a = knockout_curve(&ne, &examples, Partition::Last, None, KnockoutMode::NegInf).unwrap();
        let b = knockout_curve(&re, &examples, Partition::Last, None, KnockoutMode::NegInf).unwrap();
        for (x, y) in a.raw.iter().zip(&b.raw) {
            assert!((x.p_knock - y.p_knock).abs() < WIRE_TOL);
        }

        let cfg = TraceConfig { n_samples: 2, ..TraceConfig::default() };
        let a = trace_example(&ne, &examples[0], 0.5, &cfg).unwrap();
        let b = trace_example(&re, &examples[0], 0.5, &cfg).unwrap();
        assert_eq!(a.traced_token, b.traced_token);
        for (x, y) in a.cells.iter().zip(&b.cells) {
            assert_eq!((x.layer, x.kind, x.token_idx), (y.layer, y.kind, y.token_idx));
            assert!((x.ie_mean - y.ie_mean).abs() < WIRE_TOL, "{arch:?} {} vs {}", x.ie_mean, y.ie_mean);
        }
    }
}
