//! Named-layer parameter container used for weights, gradients and deltas.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// One named tensor stored as a flat row-major array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<T>,
}

impl<T: Scalar> Layer<T> {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<T>) -> Result<Self> {
        let name = name.into();
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::LayoutMismatch(format!(
                "layer `{name}` has shape {shape:?} but {} values",
                values.len()
            )));
        }
        Ok(Layer {
            name,
            shape,
            values,
        })
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Layer {
            name: name.into(),
            shape,
            values: vec![T::zero(); len],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Ordered collection of named layers.
///
/// Arithmetic between two vectors requires identical names and shapes, layer by layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector<T> {
    layers: Vec<Layer<T>>,
}

/// Name and shape of one layer, without values.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub name: String,
    pub shape: Vec<usize>,
}

impl LayerShape {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl<T: Scalar> ParamVector<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Result<Self> {
        for (i, layer) in layers.iter().enumerate() {
            if layers[..i].iter().any(|l| l.name == layer.name) {
                return Err(Error::LayoutMismatch(format!(
                    "duplicate layer name `{}`",
                    layer.name
                )));
            }
            if layer.shape.iter().product::<usize>() != layer.values.len() {
                return Err(Error::LayoutMismatch(format!(
                    "layer `{}` has shape {:?} but {} values",
                    layer.name,
                    layer.shape,
                    layer.values.len()
                )));
            }
        }
        Ok(ParamVector { layers })
    }

    pub fn zeros(layout: &[LayerShape]) -> Self {
        ParamVector {
            layers: layout
                .iter()
                .map(|l| Layer::zeros(l.name.clone(), l.shape.clone()))
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        ParamVector::zeros(&self.layout())
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn layout(&self) -> Vec<LayerShape> {
        self.layers
            .iter()
            .map(|l| LayerShape {
                name: l.name.clone(),
                shape: l.shape.clone(),
            })
            .collect()
    }

    pub fn layer(&self, name: &str) -> Option<&Layer<T>> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn layer_mut(&mut self, name: &str) -> Option<&mut Layer<T>> {
        self.layers.iter_mut().find(|l| l.name == name)
    }

    /// Total number of scalar parameters.
    pub fn len(&self) -> usize {
        self.layers.iter().map(Layer::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.layers.iter().flat_map(|l| l.values.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut T> {
        self.layers.iter_mut().flat_map(|l| l.values.iter_mut())
    }

    /// All values concatenated in layer order.
    pub fn flatten(&self) -> Vec<T> {
        self.iter().copied().collect()
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }

    pub fn check_layout(&self, other: &Self) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::LayoutMismatch(format!(
                "{:?} vs {:?}",
                self.layout(),
                other.layout()
            )))
        }
    }

    /// `self += scale * other`.
    pub fn axpy(&mut self, scale: T, other: &Self) -> Result<()> {
        self.check_layout(other)?;
        for (a, &b) in self.iter_mut().zip(other.iter()) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        let mut out = self.clone();
        out.axpy(T::one(), other)?;
        Ok(out)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        let mut out = self.clone();
        out.axpy(-T::one(), other)?;
        Ok(out)
    }

    pub fn scale(&self, factor: T) -> Self {
        let mut out = self.clone();
        out.iter_mut().for_each(|v| *v *= factor);
        out
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.check_layout(other)?;
        Ok(self
            .iter()
            .zip(other.iter())
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    /// Converts every value to another scalar type.
    pub fn cast<U: Scalar>(&self) -> ParamVector<U> {
        ParamVector {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    name: l.name.clone(),
                    shape: l.shape.clone(),
                    values: l.values.iter().map(|v| U::lit(v.as_f64())).collect(),
                })
                .collect(),
        }
    }
}
