//! Directory checkpoints: both networks, Ξ and its mask, the optional SVD
//! basis, and a manifest with the remaining scalars.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{DelayModel, LossWeights};
use crate::csvio::fmt_f64;
use crate::error::{Error, Result};
use crate::hankel::{meta_value, read_meta, SvdBasis};
use crate::neural::Network;
use crate::sindy::{default_var_names, SindyModel};

const MANIFEST: &str = "model.txt";

impl DelayModel {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.encoder.save(dir, "encoder")?;
        self.decoder.save(dir, "decoder")?;
        let vars = default_var_names(self.latent_dim());
        self.sindy.write_csv(&dir.join("xi.csv"), &vars)?;
        self.sindy.write_mask_csv(&dir.join("mask.csv"), &vars)?;
        if let Some(b) = &self.basis {
            b.write(dir, "basis")?;
        }
        let w = &self.weights;
        let mut s = String::new();
        let _ = writeln!(s, "n={}", self.n);
        let _ = writeln!(s, "tau={}", fmt_f64(self.tau));
        let _ = writeln!(s, "m={}", self.latent_dim());
        let _ = writeln!(s, "basis={}", u8::from(self.basis.is_some()));
        let _ = writeln!(s, "xi_frozen={}", u8::from(self.xi_frozen));
        let _ = writeln!(s, "y_shift={}", fmt_f64(self.y_shift));
        let _ = writeln!(s, "y_scale={}", fmt_f64(self.y_scale));
        for (k, v) in [("lambda_hdot", w.hdot), ("lambda_zdot", w.zdot), ("lambda_z1", w.z1), ("lambda_cons", w.cons), ("lambda_reg", w.reg)] {
            let _ = writeln!(s, "{k}={}", fmt_f64(v));
        }
        let path = dir.join(MANIFEST);
        fs::write(&path, s).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let meta = read_meta(&path)?;
        let get = |k: &str| meta_value(&meta, k, &path);
        let encoder = Network::load(dir, "encoder")?;
        let decoder = Network::load(dir, "decoder")?;
        let sindy = SindyModel::read_csv(&dir.join("xi.csv"), Some(&dir.join("mask.csv")))?;
        let basis = if get("basis")? != 0.0 {
            Some(SvdBasis::read(dir, "basis")?)
        } else {
            None
        };
        let model = DelayModel {
            encoder,
            decoder,
            sindy,
            basis,
            weights: LossWeights {
                hdot: get("lambda_hdot")?,
                zdot: get("lambda_zdot")?,
                z1: get("lambda_z1")?,
                cons: get("lambda_cons")?,
                reg: get("lambda_reg")?,
            },
            n: get("n")? as usize,
            tau: get("tau")?,
            xi_frozen: get("xi_frozen")? != 0.0,
            y_shift: get("y_shift")?,
            y_scale: get("y_scale")?,
        };
        model.check_consistent()?;
        Ok(model)
    }
}
