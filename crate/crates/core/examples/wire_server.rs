//! Serves a toy model over the line protocol and runs the conformance suite against it.
//!
//!     cargo run --example wire_server

use std::sync::Arc;

use recall_lab::engine::conformance::conformance_suite;
use recall_lab::engine::wire::{spawn_server, RemoteBackend};
use recall_lab::engine::{Backend, NativeBackend};
use recall_lab::runtime::{Hooks, Inputs, Model, ModelConfig};

fn main() {
    let model = Model::init(ModelConfig::toy_decoder(2, 16, 2, 40, 1)).unwrap();
    let native: Arc<dyn Backend> = Arc::new(NativeBackend::from(model));
    let server = spawn_server(native.clone(), "127.0.0.1:0").unwrap();
    println!("serving on {}", server.addr());

    let remote = RemoteBackend::connect(&server.addr().to_string()).unwrap();
    let info = remote.model_info().unwrap();
    println!("remote reports {:?}, {} decoder layers, vocab {}", info.arch, info.n_layers_dec, info.vocab_size);

    let inputs = Inputs::decoder(vec![7, 3, 9]);
    let a = native.execute(&inputs, &Hooks::default()).unwrap();
    let b = remote.execute(&inputs, &Hooks::default()).unwrap();
    let diff = a.distribution.iter().zip(&b.distribution).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    println!("native vs remote max abs diff {diff:.2e}");

    print!("{}", conformance_suite(&remote));
}
