//! Pseudo-burst fusion and the multi-scale U-Net applied to each pseudo-frame.

use super::layers::{Conv, Fpm};
use super::params::{Bound, ParamStore};
use crate::autodiff::{Result, Var};
use crate::error::{ModelError, TensorError};
use crate::nn::ConvSpec;
use crate::tensor::Float;

/// Builds `f` pseudo-frames from aligned features.
///
/// Pseudo-frame `c` is a shared 3×3 conv (`B → f` channels) applied to the
/// stack of channel `c` across all `B` frames.
#[derive(Debug, Clone)]
pub struct PseudoBurst {
    pub conv: Conv,
}

impl PseudoBurst {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        burst: usize,
        f: usize,
    ) -> std::result::Result<Self, ModelError> {
        Ok(PseudoBurst {
            conv: Conv::new(store, name, ConvSpec::new(burst, f, 3), false, Some(1.0))?,
        })
    }

    /// `e: [B,f,H,W]` → `[f,f,H,W]` (pseudo-frame index first).
    pub fn forward<T: Float>(&self, p: &Bound<T>, e: &Var<T>) -> Result<Var<T>> {
        let [b, _, _, _] = *e.shape() else {
            return Err(TensorError::invalid(
                "pseudo_burst",
                format!("expected [B,f,H,W], got {:?}", e.shape()),
            ));
        };
        if b != self.conv.spec.in_channels {
            return Err(TensorError::invalid(
                "pseudo_burst",
                format!(
                    "burst of {b} frames, fusion conv expects {}",
                    self.conv.spec.in_channels
                ),
            ));
        }
        self.conv.forward(p, &e.transpose01()?)
    }
}

/// Channel widths of the three U-Net levels: `f`, `round(1.5 f)`, `round(2.25 f)`.
pub fn unet_widths(f: usize) -> [usize; 3] {
    let w1 = (1.5 * f as f64).round() as usize;
    let w2 = (1.5 * w1 as f64).round() as usize;
    [f, w1, w2]
}

/// Three-level U-Net with a feature processing module after every
/// down/up conv and additive skips. Weights are shared across pseudo-frames,
/// which are processed as one batch.
#[derive(Debug, Clone)]
pub struct MsfUnet {
    pub down1: Conv,
    pub enc1: Fpm,
    pub down2: Conv,
    pub enc2: Fpm,
    pub up2: Conv,
    pub dec1: Fpm,
    pub up1: Conv,
    pub dec0: Fpm,
    pub widths: [usize; 3],
}

impl MsfUnet {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        f: usize,
    ) -> std::result::Result<Self, ModelError> {
        let widths @ [w0, w1, w2] = unet_widths(f);
        Ok(MsfUnet {
            down1: Conv::new(
                store,
                &format!("{name}.down1"),
                ConvSpec::new(w0, w1, 3).stride(2),
                false,
                Some(1.0),
            )?,
            enc1: Fpm::new(store, &format!("{name}.enc1"), w1, 2, 2)?,
            down2: Conv::new(
                store,
                &format!("{name}.down2"),
                ConvSpec::new(w1, w2, 3).stride(2),
                false,
                Some(1.0),
            )?,
            enc2: Fpm::new(store, &format!("{name}.enc2"), w2, 2, 2)?,
            up2: Conv::new(
                store,
                &format!("{name}.up2"),
                ConvSpec::new(w2, w1, 3).stride(2),
                true,
                Some(1.0),
            )?,
            dec1: Fpm::new(store, &format!("{name}.dec1"), w1, 2, 2)?,
            up1: Conv::new(
                store,
                &format!("{name}.up1"),
                ConvSpec::new(w1, w0, 3).stride(2),
                true,
                Some(1.0),
            )?,
            dec0: Fpm::new(store, &format!("{name}.dec0"), w0, 2, 2)?,
            widths,
        })
    }

    /// `x: [N,f,H,W]` or `[f,H,W]` with `H, W` divisible by 4.
    pub fn forward<T: Float>(&self, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        let s = x.shape();
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        if h % 4 != 0 || w % 4 != 0 {
            return Err(TensorError::invalid(
                "msf_unet",
                format!("spatial size {h}x{w} must be divisible by 4"),
            ));
        }
        let d1 = self.enc1.forward(p, &self.down1.forward(p, x)?)?;
        let d2 = self.enc2.forward(p, &self.down2.forward(p, &d1)?)?;
        let u1 = self.dec1.forward(p, &self.up2.forward(p, &d2)?.add(&d1)?)?;
        self.dec0.forward(p, &self.up1.forward(p, &u1)?.add(x)?)
    }
}
