use crate::error::{Error, Result};
use crate::runtime::config::EOS;
use crate::runtime::model::{Hooks, Inputs, Model};
use crate::runtime::TokenId;

/// Default budget of new tokens for greedy decoding.
pub const DEFAULT_MAX_NEW: usize = 50;

impl Model {
    /// Greedy continuation of the decoder tokens. The returned tokens include a
    /// trailing `<eos>` when one was produced. Decoding also stops when the
    /// decoder reaches `max_seq`.
    pub fn greedy_decode(&self, inputs: &Inputs, max_new: usize) -> Result<Vec<TokenId>> {
        if max_new == 0 {
            return Err(Error::Input("max_new must be at least 1".into()));
        }
        let mut cur = inputs.clone();
        let mut out = Vec::new();
        for _ in 0..max_new {
            if cur.dec.len() >= self.config.max_seq {
                break;
            }
            let next = self.forward(&cur, &Hooks::default())?.predicted_token;
            out.push(next);
            if next == EOS {
                break;
            }
            cur.dec.push(next);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::config::ModelConfig;

    #[test]
    fn stops_immediately_on_eos() {
        let mut m = Model::init(ModelConfig::toy_decoder(1, 8, 2, 16, 3)).unwrap();
        // Point eos along the final residual so its logit dominates.
        let site = crate::runtime::site::HookSite::dec(1, crate::runtime::site::SiteKind::StateH, -1);
        let out = m.forward(&Inputs::decoder(vec![1, 5]), &Hooks::capture([site])).unwrap();
        let h = ndarray::Array1::from(out.captures[0].vector.clone());
        let norm = h.dot(&h).sqrt();
        m.weights.tok_emb.row_mut(EOS as usize).assign(&(h * (100.0 / norm)));
        let decoded = m.greedy_decode(&Inputs::decoder(vec![1, 5]), DEFAULT_MAX_NEW).unwrap();
        assert_eq!(decoded, vec![EOS]);
    }

    #[test]
    fn respects_budget_and_max_seq() {
        let m = Model::init(ModelConfig { max_seq: 6, ..ModelConfig::toy_decoder(1, 8, 2, 16, 9) }).unwrap();
        let out = m.greedy_decode(&Inputs::decoder(vec![1, 5]), 3).unwrap();
        assert!(out.len() <= 3);
        let out = m.greedy_decode(&Inputs::decoder(vec![1, 5]), 50).unwrap();
        assert!(out.len() <= 4);
        assert!(m.greedy_decode(&Inputs::decoder(vec![1]), 0).is_err());
    }
}
