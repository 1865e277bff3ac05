use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{dropout, max_pool2x2, Conv2d, Linear, Params, SeededRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    FeatureExtractor,
    Classifier,
}

/// Layer layout of a target (or perceptual) network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub kind: ModelKind,
    /// (channels, height, width) of inputs.
    pub input: (usize, usize, usize),
    /// Output channels of each conv block; every block halves resolution.
    pub conv_channels: Vec<usize>,
    pub hidden: usize,
    /// Embedding width m for feature extractors; class count for classifiers.
    pub output_dim: usize,
    /// Width of the angular-margin head (feature extractors only).
    pub head_classes: usize,
}

impl Architecture {
    pub fn backbone_id(&self) -> String {
        let convs: Vec<String> = self.conv_channels.iter().map(|c| c.to_string()).collect();
        format!(
            "convnet-{}x{}x{}-c{}-h{}",
            self.input.1,
            self.input.2,
            self.input.0,
            convs.join("_"),
            self.hidden
        )
    }

    fn flat_dim(&self) -> Result<usize> {
        let blocks = self.conv_channels.len() as u32;
        let (_, h, w) = self.input;
        let div = 2usize.pow(blocks);
        if h % div != 0 || w % div != 0 || h < div {
            return Err(Error::Config(format!(
                "input {h}x{w} is not divisible by 2^{blocks} for {blocks} pooling blocks"
            )));
        }
        Ok(self.conv_channels.last().copied().unwrap_or(self.input.0) * (h / div) * (w / div))
    }
}

/// Conv blocks (conv3x3, ReLU, 2x2 max-pool), a hidden fully connected layer
/// carrying dropout, and the output layer.
#[derive(Clone)]
pub struct Network {
    pub arch: Architecture,
    pub params: Params,
    convs: Vec<Conv2d>,
    hidden: Linear,
    out: Linear,
    /// Angular-margin class weights (head_classes, m), training only.
    head: Option<Linear>,
    dtype: DType,
}

impl Network {
    pub fn build(arch: &Architecture, dtype: DType, rng: &mut SeededRng) -> Result<Self> {
        let mut params = Params::new();
        let mut convs = Vec::new();
        let mut in_ch = arch.input.0;
        for (i, &ch) in arch.conv_channels.iter().enumerate() {
            convs.push(Conv2d::new(&mut params, &format!("conv{i}"), in_ch, ch, 3, 1, dtype, rng)?);
            in_ch = ch;
        }
        let hidden = Linear::new(&mut params, "fc_hidden", arch.flat_dim()?, arch.hidden, dtype, rng)?;
        let out = Linear::new(&mut params, "fc_out", arch.hidden, arch.output_dim, dtype, rng)?;
        let head = match arch.kind {
            ModelKind::FeatureExtractor if arch.head_classes > 0 => Some(Linear::new(
                &mut params,
                "margin_head",
                arch.output_dim,
                arch.head_classes,
                dtype,
                rng,
            )?),
            _ => None,
        };
        Ok(Self {
            arch: arch.clone(),
            params,
            convs,
            hidden,
            out,
            head,
            dtype,
        })
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Activations after the first `depth` conv blocks.
    pub fn conv_features(&self, xs: &Tensor, depth: usize) -> Result<Tensor> {
        let mut h = xs.to_dtype(self.dtype)?;
        for conv in self.convs.iter().take(depth) {
            h = max_pool2x2(&conv.forward(&h)?.relu()?)?;
        }
        Ok(h)
    }

    /// Raw output layer values: embeddings, or class logits for classifiers.
    /// Dropout on the hidden layer is applied only when `train_rng` is given.
    pub fn forward_raw(
        &self,
        xs: &Tensor,
        train_rng: Option<(&mut SeededRng, f64)>,
    ) -> Result<Tensor> {
        let (_, c, h, w) = xs.dims4()?;
        if (c, h, w) != self.arch.input {
            return Err(Error::shape(format!("{:?}", self.arch.input), format!("{:?}", (c, h, w))));
        }
        let feats = self.conv_features(xs, self.convs.len())?.flatten_from(1)?;
        let mut hid = self.hidden.forward(&feats)?.relu()?;
        if let Some((rng, rate)) = train_rng {
            hid = dropout(&hid, rate, rng)?;
        }
        self.out.forward(&hid)
    }

    pub fn head(&self) -> Option<&Linear> {
        self.head.as_ref()
    }

    /// Adds one output unit (classifier) or one head class (feature
    /// extractor), keeping every existing weight.
    pub fn extend_by_one_class(&self, rng: &mut SeededRng) -> Result<Network> {
        let mut arch = self.arch.clone();
        match arch.kind {
            ModelKind::Classifier => arch.output_dim += 1,
            ModelKind::FeatureExtractor => arch.head_classes += 1,
        }
        let grown = Network::build(&arch, self.dtype, rng)?;
        let old = self.params.snapshot()?;
        let mut values = grown.params.snapshot()?;
        for (name, old_value) in old {
            let new_value = values
                .get(&name)
                .ok_or_else(|| Error::Precondition(format!("missing parameter {name}")))?;
            let merged = if new_value.dims() == old_value.dims() {
                old_value
            } else {
                // Output rows grew by one: keep old rows, append the fresh one.
                let rows = old_value.dim(0)?;
                let fresh = new_value.narrow(0, rows, new_value.dim(0)? - rows)?;
                Tensor::cat(&[&old_value, &fresh], 0)?
            };
            values.insert(name, merged);
        }
        grown.params.restore(&values)?;
        Ok(grown)
    }
}
