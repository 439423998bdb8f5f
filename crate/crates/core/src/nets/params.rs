use asda_autodiff::{Graph, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Which part of the system a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    /// Shared trunk.
    Base,
    /// Segmentation-stream feature layer tapped by the pixel classifier.
    SegFeature,
    /// Segmentation score layers and upsampling.
    SegDecoder,
    /// Detection-stream layers and heads.
    Det,
    PixelClassifier,
    ObjectClassifier,
}

impl ParamGroup {
    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Base => "base",
            ParamGroup::SegFeature => "seg_feature",
            ParamGroup::SegDecoder => "seg_decoder",
            ParamGroup::Det => "det",
            ParamGroup::PixelClassifier => "pdc",
            ParamGroup::ObjectClassifier => "odc",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Some(match s {
            "base" => ParamGroup::Base,
            "seg_feature" => ParamGroup::SegFeature,
            "seg_decoder" => ParamGroup::SegDecoder,
            "det" => ParamGroup::Det,
            "pdc" => ParamGroup::PixelClassifier,
            "odc" => ParamGroup::ObjectClassifier,
            _ => return None,
        })
    }

    pub fn is_segmentation(self) -> bool {
        matches!(self, ParamGroup::SegFeature | ParamGroup::SegDecoder)
    }

    /// Learning-rate class of a DS parameter: the trunk uses the base rate.
    pub fn is_trunk(self) -> bool {
        self == ParamGroup::Base
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor<f32>,
}

/// An ordered, named collection of parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
}

/// Graph handles for a [`ParamSet`], in the same order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
    names: Vec<String>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Var {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"));
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Truncated normal (resampled beyond two std) as used for all weight init.
pub fn truncated_normal(shape: &[usize], std: f32, rng: &mut impl Rng) -> Tensor<f32> {
    Tensor::from_fn(shape.to_vec(), |_| loop {
        let z: f32 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            break z * std;
        }
    })
}

pub const INIT_STD: f32 = 0.05;

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn push(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor<f32>) {
        let name = name.into();
        assert!(self.index(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param { name, group, value });
    }

    /// Adds a conv-style weight (truncated normal) and a zero bias.
    pub fn push_layer(
        &mut self,
        name: &str,
        group: ParamGroup,
        weight_shape: &[usize],
        bias_len: usize,
        rng: &mut impl Rng,
    ) {
        self.push(format!("{name}.w"), group, truncated_normal(weight_shape, INIT_STD, rng));
        self.push(format!("{name}.b"), group, Tensor::zeros(vec![bias_len]));
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.index(name).map(|i| &self.params[i].value)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, Param> {
        self.params.iter_mut()
    }

    pub fn extend(&mut self, other: ParamSet) {
        for p in other.params {
            self.push(p.name, p.group, p.value);
        }
    }

    /// Places every parameter on the tape; `trainable` decides which ones
    /// receive gradients.
    pub fn bind(&self, g: &mut Graph<f32>, trainable: impl Fn(ParamGroup) -> bool) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|p| g.leaf(p.value.clone(), trainable(p.group)))
                .collect(),
            names: self.params.iter().map(|p| p.name.clone()).collect(),
        }
    }

    /// Bitwise equality of all values.
    pub fn bit_eq(&self, other: &ParamSet) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| {
                a.name == b.name
                    && a.value.shape() == b.value.shape()
                    && a.value
                        .data()
                        .iter()
                        .zip(b.value.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}
