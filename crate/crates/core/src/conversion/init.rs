use crate::error::{LpaError, Result};
use crate::mixer::{LpaConfig, LpaLayer};
use crate::reference::AttentionLayer;

/// LPA layer initialized from an attention layer: `W_V` and `W_O` are
/// copied, and aperiodic query `q_p` of head `h` takes row
/// `(h * A + p) mod d` of `W_Q`, restricted to the head's channel slice and
/// truncated to the predictor's `dh/2` hidden width. Everything else comes
/// from the seeded default initialization.
pub fn selective_init(attn: &AttentionLayer, config: LpaConfig, seed: u64) -> Result<LpaLayer> {
    let d = attn.config.d;
    if config.d != d {
        return Err(LpaError::Config(format!(
            "attention width {d} differs from LPA width {}",
            config.d
        )));
    }
    let mut layer = LpaLayer::init(config, seed)?;
    layer.params.w_v = attn.params.w_v.clone();
    layer.params.w_o = attn.params.w_o.clone();
    let dh = layer.config.head_width();
    let a = layer.config.split.aperiodic;
    let w_q = &attn.params.w_q;
    for (h, head) in layer.params.heads.iter_mut().enumerate() {
        let q = &mut head.aperiodic.query;
        let half = q.rows();
        for p in 0..a {
            let row = (h * a + p) % d;
            for j in 0..half {
                q.set(j, p, w_q.at(row, (h * dh + j) % d));
            }
        }
    }
    Ok(layer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gates::PulseSplit;
    use crate::numerics::kernels::softmax_rows;
    use crate::reference::AttentionConfig;

    fn attn(d: usize) -> AttentionLayer {
        AttentionLayer::init(AttentionConfig::new(d, 2), 5).unwrap()
    }

    #[test]
    fn copies_value_and_output() {
        let a = attn(8);
        let l = selective_init(&a, LpaConfig::new(8, 2, PulseSplit::uniform(2)), 1).unwrap();
        assert_eq!(l.params.w_v, a.params.w_v);
        assert_eq!(l.params.w_o, a.params.w_o);
        let q = &l.params.heads[1].aperiodic.query;
        assert_eq!(q.at(0, 1), a.params.w_q.at(3, 4));
        assert_eq!(q.at(1, 0), a.params.w_q.at(2, 5));
    }

    #[test]
    fn uniform_weights_unit_amplitudes() {
        let l = selective_init(&attn(8), LpaConfig::new(8, 2, PulseSplit::uniform(3)), 1).unwrap();
        for h in &l.params.heads {
            let w = softmax_rows(&h.wlogit);
            assert!(w.data().iter().all(|&v| (v - 1.0 / 9.0).abs() < 1e-15));
            assert!(h.amp.data().iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn periods_span_three_octaves() {
        let l = selective_init(&attn(8), LpaConfig::new(8, 1, PulseSplit::uniform(4)), 1).unwrap();
        let t = l.params.heads[0].periodic.periods();
        let (lo, hi) = t.iter().fold((f64::MAX, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
        assert!(hi / lo >= 8.0, "{t:?}");
    }

    #[test]
    fn width_mismatch() {
        assert!(selective_init(&attn(8), LpaConfig::new(4, 1, PulseSplit::uniform(1)), 0).is_err());
    }
}
