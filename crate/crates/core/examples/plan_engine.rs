//! Declarative intervention plans: validation, stored runs, restoration and attention blocks.
//!
//!     cargo run --example plan_engine

use recall_lab::engine::{Engine, Intervention, NativeBackend};
use recall_lab::runtime::{AttentionKind, AttnBlock, HookSite, Inputs, KnockoutMode, Model, ModelConfig, SiteKind, Stream};

fn main() {
    let model = Model::init(ModelConfig::toy_decoder(3, 16, 2, 40, 3)).unwrap();
    let engine = Engine::new(NativeBackend::from(model));
    let donor = Inputs::decoder(vec![4, 8, 15, 16]);
    let target = Inputs::decoder(vec![23, 8, 15, 2]);

    let bad = [Intervention::capture(HookSite::dec(9, SiteKind::StateH, 0))];
    for d in engine.validate(&bad).unwrap_err() {
        println!("rejected: {d}");
    }

    let site = HookSite::dec(2, SiteKind::StateH, -1);
    let (id, _) = engine.run_and_store(&donor, &[Intervention::capture(site)]).unwrap();
    let plain = engine.run_with_plan(&target, &[]).unwrap();
    let restored = engine.run_with_plan(&target, &[Intervention::restore(site, id)]).unwrap();
    engine.release(id);
    println!("target predicts {}, with {site} from the donor it predicts {}", plain.predicted_token, restored.predicted_token);

    for mode in [KnockoutMode::NegInf, KnockoutMode::ZeroNoRenorm] {
        let block = AttnBlock {
            stream: Stream::Dec,
            attention: AttentionKind::SelfAttn,
            layers: vec![0, 1, 2],
            query: -1,
            keys: vec![0, 1, 2],
            mode,
        };
        let out = engine.run_with_plan(&target, &[Intervention::AttnBlock(block)]).unwrap();
        let t = plain.predicted_token;
        println!("{mode:?}: last token sees only itself, p({t}) {:.4} -> {:.4}", plain.prob(t), out.prob(t));
    }
}
