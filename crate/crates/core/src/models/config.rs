use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::ModelError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    ClassToken,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    pub pooling: Pooling,
}

impl Default for ViTConfig {
    /// Desk-scale toy ViT for 32-pixel RGB images.
    fn default() -> Self {
        ViTConfig {
            image_size: 32,
            patch_size: 4,
            channels: 3,
            embed_dim: 128,
            depth: 6,
            heads: 4,
            mlp_ratio: 4,
            num_classes: 10,
            pooling: Pooling::Mean,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("embed_dim", self.embed_dim),
            ("depth", self.depth),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("num_classes", self.num_classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be positive")));
            }
        }
        if self.image_size % self.patch_size != 0 {
            return Err(ModelError::Config(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(ModelError::Config(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        Ok(())
    }

    /// Patch tokens per image, excluding the class token.
    pub fn num_patches(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }

    pub fn num_tokens(&self) -> usize {
        self.num_patches() + usize::from(self.pooling == Pooling::ClassToken)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

/// Three-stage residual conv net; stage strides are 1, 2, 2.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CnnConfig {
    pub image_size: usize,
    pub channels: usize,
    pub widths: [usize; 3],
    pub groups: usize,
    pub num_classes: usize,
}

impl Default for CnnConfig {
    fn default() -> Self {
        CnnConfig {
            image_size: 32,
            channels: 3,
            widths: [32, 64, 128],
            groups: 8,
            num_classes: 10,
        }
    }
}

impl CnnConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.image_size == 0 || self.channels == 0 || self.num_classes == 0 || self.groups == 0 {
            return Err(ModelError::Config(
                "image_size, channels, groups and num_classes must be positive".into(),
            ));
        }
        for w in self.widths {
            if w == 0 || w % self.groups != 0 {
                return Err(ModelError::Config(format!(
                    "width {w} not a positive multiple of groups {}",
                    self.groups
                )));
            }
        }
        Ok(())
    }

    pub fn stride(stage: usize) -> usize {
        if stage == 0 {
            1
        } else {
            2
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelConfig {
    Vit(ViTConfig),
    Cnn(CnnConfig),
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        match self {
            ModelConfig::Vit(c) => c.validate(),
            ModelConfig::Cnn(c) => c.validate(),
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            ModelConfig::Vit(c) => c.num_classes,
            ModelConfig::Cnn(c) => c.num_classes,
        }
    }

    /// Expected `[C, H, W]` of one input image.
    pub fn input_shape(&self) -> [usize; 3] {
        match self {
            ModelConfig::Vit(c) => [c.channels, c.image_size, c.image_size],
            ModelConfig::Cnn(c) => [c.channels, c.image_size, c.image_size],
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ModelConfig::Vit(_) => "vit",
            ModelConfig::Cnn(_) => "cnn",
        }
    }

    /// Every parameter name with its shape and initialization rule.
    pub fn param_specs(&self) -> Result<BTreeMap<String, ParamSpec>, ModelError> {
        self.validate()?;
        let mut specs = BTreeMap::new();
        let mut add = |name: String, shape: Vec<usize>, init: Init| {
            specs.insert(name, ParamSpec { shape, init });
        };
        match self {
            ModelConfig::Vit(c) => {
                let d = c.embed_dim;
                let hidden = d * c.mlp_ratio;
                add("patch_embed.weight".into(), vec![c.patch_dim(), d], Init::TruncNormal);
                add("patch_embed.bias".into(), vec![d], Init::Zeros);
                if c.pooling == Pooling::ClassToken {
                    add("cls_token".into(), vec![1, d], Init::TruncNormal);
                }
                add("pos_embed".into(), vec![c.num_tokens(), d], Init::TruncNormal);
                for b in 0..c.depth {
                    let p = format!("blocks.{b}");
                    for norm in ["norm1", "norm2"] {
                        add(format!("{p}.{norm}.weight"), vec![d], Init::Ones);
                        add(format!("{p}.{norm}.bias"), vec![d], Init::Zeros);
                    }
                    for lin in ["q", "k", "v", "proj"] {
                        add(format!("{p}.attn.{lin}.weight"), vec![d, d], Init::TruncNormal);
                        add(format!("{p}.attn.{lin}.bias"), vec![d], Init::Zeros);
                    }
                    add(format!("{p}.mlp.fc1.weight"), vec![d, hidden], Init::TruncNormal);
                    add(format!("{p}.mlp.fc1.bias"), vec![hidden], Init::Zeros);
                    add(format!("{p}.mlp.fc2.weight"), vec![hidden, d], Init::TruncNormal);
                    add(format!("{p}.mlp.fc2.bias"), vec![d], Init::Zeros);
                }
                add("norm.weight".into(), vec![d], Init::Ones);
                add("norm.bias".into(), vec![d], Init::Zeros);
                add("head.weight".into(), vec![d, c.num_classes], Init::TruncNormal);
                add("head.bias".into(), vec![c.num_classes], Init::Zeros);
            }
            ModelConfig::Cnn(c) => {
                let w0 = c.widths[0];
                add("stem.conv.weight".into(), vec![w0, c.channels, 3, 3], Init::TruncNormal);
                add("stem.norm.weight".into(), vec![w0], Init::Ones);
                add("stem.norm.bias".into(), vec![w0], Init::Zeros);
                let mut cin = w0;
                for (s, &cout) in c.widths.iter().enumerate() {
                    let p = format!("stages.{s}");
                    add(format!("{p}.conv1.weight"), vec![cout, cin, 3, 3], Init::TruncNormal);
                    add(format!("{p}.conv2.weight"), vec![cout, cout, 3, 3], Init::TruncNormal);
                    for norm in ["norm1", "norm2"] {
                        add(format!("{p}.{norm}.weight"), vec![cout], Init::Ones);
                        add(format!("{p}.{norm}.bias"), vec![cout], Init::Zeros);
                    }
                    if CnnConfig::stride(s) != 1 || cin != cout {
                        add(format!("{p}.shortcut.weight"), vec![cout, cin, 1, 1], Init::TruncNormal);
                    }
                    cin = cout;
                }
                add("head.weight".into(), vec![cin, c.num_classes], Init::TruncNormal);
                add("head.bias".into(), vec![c.num_classes], Init::Zeros);
            }
        }
        Ok(specs)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    TruncNormal,
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub shape: Vec<usize>,
    pub init: Init,
}
