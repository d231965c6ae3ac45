//! Forward passes with capture and replacement hooks on a random toy model.
//!
//!     cargo run --example forward_hooks

use recall_lab::runtime::{all_sites, HookSite, Hooks, Inputs, Model, ModelConfig, SiteKind, Stream};

fn main() {
    let model = Model::init(ModelConfig::toy_decoder(2, 16, 2, 40, 7)).unwrap();
    let inputs = Inputs::decoder(vec![5, 9, 12, 20]);

    let sites = all_sites(&model.config, Stream::Dec, inputs.dec.len(), &[SiteKind::StateH, SiteKind::MlpF]);
    let clean = model.forward(&inputs, &Hooks::capture(sites.clone())).unwrap();
    println!("predicted {} with p={:.4}, {} captures", clean.predicted_token, clean.prob(clean.predicted_token), clean.captures.len());

    let last = HookSite::dec(model.config.n_layers_dec, SiteKind::StateH, -1);
    let final_state = clean.capture(&last.absolute(inputs.dec.len()).unwrap()).unwrap();
    let logits = model.project(final_state);
    let top = (0..logits.len()).max_by(|&a, &b| logits[a].total_cmp(&logits[b])).unwrap();
    println!("final state projected onto the vocabulary ranks {top} first");

    let zero_mlp = HookSite::dec(1, SiteKind::MlpF, -1);
    let hooks = Hooks { replacements: vec![(zero_mlp, vec![0.0; model.config.d_model])], ..Hooks::default() };
    let ablated = model.forward(&inputs, &hooks).unwrap();
    let token = clean.predicted_token;
    println!("zeroing {zero_mlp}: p({token}) {:.4} -> {:.4}", clean.prob(token), ablated.prob(token));
}
