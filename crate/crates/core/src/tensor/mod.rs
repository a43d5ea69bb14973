//! Dense row-major tensors with tape-based reverse-mode differentiation,
//! covering only the operations the denoiser uses.
//!
//! Values live in [`Tensor`]; differentiable computation is recorded on a
//! [`Graph`], which owns copies of its inputs and is confined to one thread.
//! Named parameters are kept in a [`ParamStore`] and bound onto a graph for
//! each forward pass.

mod archive;
mod graph;
mod init;

pub use archive::{ArchiveEntry, TensorArchive};
pub use graph::{conv_output_len, conv_padding, Bound, Graph, Var};
pub use init::{glorot_uniform, orthogonal_init};

use std::collections::HashMap;
use std::fmt::{Debug, Display};

use num_traits::Float;

use crate::error::{Error, Result};

/// Element precision as stored in archives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }
}

impl std::str::FromStr for DType {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            other => Err(format!("unknown precision `{other}` (expected f32 or f64)")),
        }
    }
}

/// Scalar element type of tensors and models.
pub trait Real: Float + Default + Debug + Display + Send + Sync + std::iter::Sum + 'static {
    const DTYPE: DType;

    fn of(v: f64) -> Self;
    fn f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const DTYPE: DType = DType::F32;

    fn of(v: f64) -> Self {
        v as f32
    }

    fn f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Real for f64 {
    const DTYPE: DType = DType::F64;

    fn of(v: f64) -> Self {
        v
    }

    fn f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// A dense tensor with an optional gradient buffer of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<R: Real> {
    shape: Vec<usize>,
    data: Vec<R>,
    grad: Option<Vec<R>>,
}

impl<R: Real> Tensor<R> {
    pub fn new(shape: &[usize], data: Vec<R>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {n} elements, buffer has {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![R::zero(); n],
            grad: None,
        }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| R::of(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[R] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [R] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<R> {
        self.data
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.f64()).collect()
    }

    pub fn grad(&self) -> Option<&[R]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<R>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::shape("gradient buffer does not match tensor shape"));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Converts to another precision, dropping the gradient.
    pub fn cast<S: Real>(&self) -> Tensor<S> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| S::of(v.f64())).collect(),
            grad: None,
        }
    }
}

/// Identifier of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named parameter tensors in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<R: Real> {
    names: Vec<String>,
    tensors: Vec<Tensor<R>>,
    index: HashMap<String, usize>,
}

impl<R: Real> ParamStore<R> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<R>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: ParamId) -> &Tensor<R> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<R> {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<R>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor<R>> {
        self.id(name).map(|id| &mut self.tensors[id.0])
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<R>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<R>)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter_mut())
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn clear_grads(&mut self) {
        for t in &mut self.tensors {
            t.clear_grad();
        }
    }

    pub fn cast<S: Real>(&self) -> ParamStore<S> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    pub fn to_archive(&self) -> TensorArchive {
        let mut archive = TensorArchive::new();
        for (_, name, t) in self.iter() {
            archive.push(name, t);
        }
        archive
    }

    /// Overwrites every parameter from an archive with identical names and shapes.
    pub fn load_archive(&mut self, archive: &TensorArchive) -> Result<()> {
        for i in 0..self.tensors.len() {
            let name = &self.names[i];
            let loaded: Tensor<R> = archive.get(name)?;
            if loaded.shape() != self.tensors[i].shape() {
                return Err(Error::Archive(format!(
                    "parameter {name}: archive shape {:?} differs from model shape {:?}",
                    loaded.shape(),
                    self.tensors[i].shape()
                )));
            }
            self.tensors[i] = loaded;
        }
        if archive.len() != self.tensors.len() {
            return Err(Error::Archive(format!(
                "archive holds {} tensors, model has {}",
                archive.len(),
                self.tensors.len()
            )));
        }
        Ok(())
    }
}
