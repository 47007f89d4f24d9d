//! The enhancement network: a U-Net whose bottleneck is refined by two
//! semantic branches (attention over segmenter features, and a per-channel
//! power transform driven by the segmenter embedding) and a learned fusion.

mod blocks;
mod unet;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sllen_tensor::{Binding, Graph, ParamSet, Tensor, Var};

use crate::nn::component_rng;
use crate::ssn::{SemanticOutputs, EMBEDDING_CHANNELS};
use crate::weights::{Dtype, WeightFile};
use crate::{Error, Result};

pub use blocks::{fuse, inverse_softplus_one, power_transform, Fused, POWER_BASE_FLOOR};
pub use unet::Encoded;

use blocks::{Ffb, Hsbab, Hseb, Rsaeb};
use unet::{Decoder, Encoder};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Both branches and fusion.
    Full,
    /// Without the attention branch (SLLEN-1).
    NoHsf,
    /// Without the embedding branch (SLLEN-2).
    NoIef,
    /// Plain U-Net (SLLEN-3).
    Unet,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoHsf, Variant::NoIef, Variant::Unet];

    pub fn uses_hsf(self) -> bool {
        matches!(self, Variant::Full | Variant::NoIef)
    }

    pub fn uses_ief(self) -> bool {
        matches!(self, Variant::Full | Variant::NoHsf)
    }

    pub fn uses_fusion(self) -> bool {
        self != Variant::Unet
    }

    /// Name used in ablation tables.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "FULL",
            Variant::NoHsf => "SLLEN-1",
            Variant::NoIef => "SLLEN-2",
            Variant::Unet => "SLLEN-3",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Variant::Full => "full",
            Variant::NoHsf => "no_hsf",
            Variant::NoIef => "no_ief",
            Variant::Unet => "unet",
        };
        f.write_str(s)
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "full" | "sllen" => Ok(Variant::Full),
            "no_hsf" | "sllen_1" => Ok(Variant::NoHsf),
            "no_ief" | "sllen_2" => Ok(Variant::NoIef),
            "unet" | "sllen_3" => Ok(Variant::Unet),
            _ => Err(Error::Config(format!(
                "unknown variant '{s}' (expected full, no_hsf, no_ief or unet)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub base_channels: usize,
    pub depth: usize,
    pub attention_dk: usize,
    pub variant: Variant,
    pub seed: u64,
    /// Channels of the semantic map `S`.
    pub num_classes: usize,
    pub hseb_widths: Vec<usize>,
    /// Add `L` back onto the attention output.
    pub hsbab_residual: bool,
    /// Largest bottleneck token count the attention accepts.
    pub token_cap: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            depth: 3,
            attention_dk: 64,
            variant: Variant::Full,
            seed: 0,
            num_classes: 21,
            hseb_widths: vec![64, 128, 512],
            hsbab_residual: true,
            token_cap: 4096,
        }
    }
}

impl NetConfig {
    pub fn bottleneck_channels(&self) -> usize {
        self.base_channels << self.depth
    }

    /// Required divisor of the input height and width.
    pub fn spatial_multiple(&self) -> usize {
        1 << self.depth
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("base_channels", self.base_channels),
            ("depth", self.depth),
            ("attention_dk", self.attention_dk),
            ("num_classes", self.num_classes),
            ("token_cap", self.token_cap),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be >= 1")));
            }
        }
        if self.depth > 6 {
            return Err(Error::Config(format!("depth {} is too large", self.depth)));
        }
        if self.hseb_widths.is_empty() || self.hseb_widths.contains(&0) {
            return Err(Error::Config("hseb_widths must be non-empty and positive".into()));
        }
        Ok(())
    }
}

/// Every intermediate of one forward pass. Branch outputs are `None` when the
/// variant skips them.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub o: Var,
    pub l: Var,
    pub h: Option<Var>,
    pub l_h: Option<Var>,
    pub l_b: Option<Var>,
    pub f: Var,
    pub e: Vec<Var>,
    pub d: Vec<Var>,
    pub alpha: Option<Var>,
    pub beta: Option<Var>,
    pub w_map: Option<Var>,
    pub attention: Option<Var>,
    pub lh_prime: Option<Var>,
    pub lb_prime: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct SllenNet {
    cfg: NetConfig,
    params: ParamSet,
    encoder: Encoder,
    decoder: Decoder,
    hseb: Option<Hseb>,
    hsbab: Option<Hsbab>,
    rsaeb: Option<Rsaeb>,
    ffb: Option<Ffb>,
}

impl SllenNet {
    /// Builds a freshly initialized network. Each block draws from its own
    /// seeded stream, so variants built from one seed share U-Net weights.
    pub fn build(cfg: NetConfig) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let (base, depth, seed) = (cfg.base_channels, cfg.depth, cfg.seed);
        let cb = cfg.bottleneck_channels();
        let encoder = Encoder::new(&mut params, base, depth, &mut component_rng(seed, "encoder"));
        let decoder = Decoder::new(&mut params, base, depth, &mut component_rng(seed, "decoder"));
        let v = cfg.variant;
        let hseb = v.uses_hsf().then(|| {
            Hseb::new(&mut params, cfg.num_classes, &cfg.hseb_widths, &mut component_rng(seed, "hseb"))
        });
        let hsbab = v.uses_hsf().then(|| {
            let hc = *cfg.hseb_widths.last().expect("validated");
            Hsbab::new(
                &mut params,
                cb,
                hc,
                cfg.attention_dk,
                cfg.hsbab_residual,
                cfg.token_cap,
                &mut component_rng(seed, "hsbab"),
            )
        });
        let rsaeb = v
            .uses_ief()
            .then(|| Rsaeb::new(&mut params, cb, &mut component_rng(seed, "rsaeb")));
        let ffb = v
            .uses_fusion()
            .then(|| Ffb::new(&mut params, cb, &mut component_rng(seed, "ffb")));
        Ok(Self {
            cfg,
            params,
            encoder,
            decoder,
            hseb,
            hsbab,
            rsaeb,
            ffb,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn variant(&self) -> Variant {
        self.cfg.variant
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Whether a forward pass needs segmenter outputs.
    pub fn needs_semantics(&self) -> bool {
        self.cfg.variant != Variant::Unet
    }

    /// Zeroes the alpha/beta heads' weights so both start at exactly 1.
    pub fn zero_rsaeb_heads(&mut self) {
        if let Some(r) = &self.rsaeb {
            for c in [r.head_alpha, r.head_beta] {
                self.params.get_mut(c.weight).fill(0.0);
                self.params.get_mut(c.bias).fill(inverse_softplus_one());
            }
        }
    }

    pub fn encode(&self, g: &mut Graph, b: &Binding, img: Var) -> Result<Encoded> {
        self.encoder.forward(g, b, img)
    }

    pub fn decode(&self, g: &mut Graph, b: &Binding, f: Var, skips: &[Var]) -> Result<(Var, Vec<Var>)> {
        self.decoder.forward(g, b, f, skips)
    }

    /// Full forward pass. `s` is the (N, classes, H, W) semantic map and `b`
    /// the (N, 512, h, w) embedding; both may be `None` for the U-Net variant.
    pub fn forward(
        &self,
        g: &mut Graph,
        bind: &Binding,
        img: Var,
        s: Option<Var>,
        b: Option<Var>,
    ) -> Result<ForwardTrace> {
        let enc = self.encode(g, bind, img)?;
        let l = enc.l;
        let (lh_grid, lw_grid) = (g.shape(l)[2], g.shape(l)[3]);
        let mut h = None;
        let mut l_h = None;
        let mut attention = None;
        if let (Some(hseb), Some(hsbab)) = (&self.hseb, &self.hsbab) {
            let s = s.ok_or_else(|| Error::Shape("variant needs the semantic map S".into()))?;
            let ss = g.shape(s).to_vec();
            if ss.len() != 4 || ss[1] != self.cfg.num_classes {
                return Err(Error::Shape(format!(
                    "semantic map must be (N,{},H,W), got {ss:?}",
                    self.cfg.num_classes
                )));
            }
            let hv = hseb.forward(g, bind, s, lh_grid, lw_grid)?;
            let (lh, a) = hsbab.forward(g, bind, l, hv)?;
            h = Some(hv);
            l_h = Some(lh);
            attention = Some(a);
        }
        let mut l_b = None;
        let mut alpha = None;
        let mut beta = None;
        if let Some(rsaeb) = &self.rsaeb {
            let b = b.ok_or_else(|| Error::Shape("variant needs the embedding B".into()))?;
            let bs = g.shape(b).to_vec();
            if bs.len() != 4 || bs[1] != EMBEDDING_CHANNELS {
                return Err(Error::Shape(format!(
                    "embedding must be (N,{EMBEDDING_CHANNELS},h,w), got {bs:?}"
                )));
            }
            let b = g.resize_bilinear(b, lh_grid, lw_grid)?;
            let (lb, a, be) = rsaeb.forward(g, bind, l, b)?;
            l_b = Some(lb);
            alpha = Some(a);
            beta = Some(be);
        }
        let (f, fused) = match &self.ffb {
            Some(ffb) => {
                let fused = ffb.forward(g, bind, l_h.unwrap_or(l), l_b.unwrap_or(l))?;
                (fused.f, Some(fused))
            }
            None => (l, None),
        };
        let (o, d) = self.decode(g, bind, f, &enc.skips)?;
        Ok(ForwardTrace {
            o,
            l,
            h,
            l_h,
            l_b,
            f,
            e: enc.embeddings,
            d,
            alpha,
            beta,
            w_map: fused.map(|x| x.w_map),
            attention,
            lh_prime: fused.map(|x| x.lh_prime),
            lb_prime: fused.map(|x| x.lb_prime),
        })
    }

    /// Inference on an (N, 3, H, W) batch with frozen parameters.
    pub fn infer(&self, img: &Tensor, sem: Option<&SemanticOutputs>) -> Result<Tensor> {
        let mut g = Graph::new();
        let bind = self.params.bind(&mut g, false);
        let x = g.constant(img.clone());
        let (s, b) = match sem {
            Some(so) => (Some(g.constant(so.s.clone())), Some(g.constant(so.b.clone()))),
            None => (None, None),
        };
        let tr = self.forward(&mut g, &bind, x, s, b)?;
        Ok(g.value(tr.o).clone())
    }

    /// Weight file holding the parameters, with the config in the header.
    /// `extra` blocks (e.g. optimizer state) are appended after the parameters.
    pub fn to_weight_file(
        &self,
        dtype: Dtype,
        meta: serde_json::Value,
        extra: Vec<(String, Tensor)>,
    ) -> WeightFile {
        let mut header = serde_json::json!({ "net": self.cfg });
        if let (Some(h), serde_json::Value::Object(m)) = (header.as_object_mut(), meta) {
            for (k, v) in m {
                h.insert(k, v);
            }
        }
        let mut file = WeightFile::from_params(&self.params, dtype, header);
        file.blocks.extend(extra);
        file
    }

    /// Rebuilds a network from a weight file. When `expected` is given the
    /// stored config must equal it. Returns the network and trailing blocks.
    pub fn from_weight_file<'a>(
        file: &'a WeightFile,
        expected: Option<&NetConfig>,
    ) -> Result<(Self, &'a [(String, Tensor)])> {
        let stored = file
            .meta
            .get("net")
            .ok_or_else(|| Error::WeightLoad("checkpoint header has no network config".into()))?;
        let cfg: NetConfig = serde_json::from_value(stored.clone())
            .map_err(|e| Error::WeightLoad(format!("bad network config in header: {e}")))?;
        if let Some(exp) = expected {
            if exp != &cfg {
                return Err(Error::WeightLoad(format!(
                    "checkpoint config {cfg:?} does not match requested {exp:?}"
                )));
            }
        }
        let mut net = Self::build(cfg)?;
        let rest = file.load_into(&mut net.params)?;
        Ok((net, rest))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_weight_file(Dtype::F32, serde_json::json!({}), Vec::new()).save(path)
    }

    pub fn load(path: &Path, expected: Option<&NetConfig>) -> Result<Self> {
        let file = WeightFile::load(path)?;
        Ok(Self::from_weight_file(&file, expected)?.0)
    }
}
