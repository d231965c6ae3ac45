use serde::{Deserialize, Serialize};

use crate::runtime::Arch;

/// Sublayer restoration window for tracing: 10 layers for decoder-only, 6 for encoder-decoder.
pub fn default_trace_window(arch: Arch) -> usize {
    match arch {
        Arch::DecoderOnly => 10,
        Arch::EncoderDecoder => 6,
    }
}

/// Attention knockout window: 6 layers for decoder-only, 4 for encoder-decoder.
pub fn default_knockout_window(arch: Arch) -> usize {
    match arch {
        Arch::DecoderOnly => 6,
        Arch::EncoderDecoder => 4,
    }
}

/// Contiguous run of layers around a center, clipped to the model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerWindow {
    pub center: usize,
    pub width: usize,
    pub layers: Vec<usize>,
}

/// Resolves `[center - floor(w/2), center + ceil(w/2) - 1]` clipped to `0..n_layers`.
///
/// Panics if `width == 0` or `center >= n_layers`.
pub fn resolve_window(center: usize, width: usize, n_layers: usize) -> LayerWindow {
    assert!(width >= 1, "window width must be at least 1");
    assert!(center < n_layers, "window center {center} outside {n_layers} layers");
    let lo = center.saturating_sub(width / 2);
    let hi = (center + width.div_ceil(2)).saturating_sub(1).min(n_layers - 1);
    LayerWindow { center, width, layers: (lo..=hi).collect() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn clipped_low() {
        assert_eq!(resolve_window(0, 10, 32).layers, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn interior() {
        assert_eq!(resolve_window(16, 6, 24).layers, (13..=18).collect::<Vec<_>>());
    }

    #[test]
    fn width_one_is_the_center() {
        assert_eq!(resolve_window(3, 1, 4).layers, vec![3]);
    }

    #[test]
    fn defaults() {
        assert_eq!(default_trace_window(Arch::DecoderOnly), 10);
        assert_eq!(default_trace_window(Arch::EncoderDecoder), 6);
        assert_eq!(default_knockout_window(Arch::DecoderOnly), 6);
        assert_eq!(default_knockout_window(Arch::EncoderDecoder), 4);
    }

    proptest! {
        #[test]
        fn window_invariants(n in 1usize..64, c in 0usize..64, w in 1usize..20) {
            let c = c % n;
            let win = resolve_window(c, w, n);
            prop_assert!(win.layers.len() <= w);
            prop_assert!(win.layers.contains(&c));
            prop_assert!(win.layers.windows(2).all(|p| p[1] == p[0] + 1));
            prop_assert!(*win.layers.last().unwrap() < n);
            let unclipped = c >= w / 2 && c + w.div_ceil(2) <= n;
            if unclipped {
                prop_assert_eq!(win.layers.len(), w);
            }
        }
    }
}
