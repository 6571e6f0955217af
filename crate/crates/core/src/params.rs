//! Flat parameter vectors with named slices, and their checkpoint format.
//!
//! A checkpoint is two files: `<stem>.bin` holds the flat vector as 64-bit
//! little-endian floats, `<stem>.layout` is a plain-text manifest with one
//! `name offset shape` line per slice (shape written as `RxC` or `N`).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSlice {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl ParamSlice {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Ordered, contiguous partition of a flat vector into named slices.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    slices: Vec<ParamSlice>,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a slice right after the previous one and returns its offset.
    pub fn push(&mut self, name: impl Into<String>, shape: &[usize]) -> usize {
        let offset = self.len();
        self.slices.push(ParamSlice {
            name: name.into(),
            offset,
            shape: shape.to_vec(),
        });
        offset
    }

    pub fn len(&self) -> usize {
        self.slices.last().map_or(0, |s| s.offset + s.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn slices(&self) -> &[ParamSlice] {
        &self.slices
    }

    pub fn get(&self, name: &str) -> Option<&ParamSlice> {
        self.slices.iter().find(|s| s.name == name)
    }

    pub fn slices_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a ParamSlice> {
        self.slices.iter().filter(move |s| s.name.starts_with(prefix))
    }

    /// Checks that slices tile `[0, len)` exactly once, in order.
    pub fn is_partition(&self) -> bool {
        let mut next = 0;
        for s in &self.slices {
            if s.offset != next {
                return false;
            }
            next += s.len();
        }
        true
    }

    pub fn manifest(&self) -> String {
        let mut out = String::new();
        for s in &self.slices {
            let shape = s
                .shape
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join("x");
            let _ = writeln!(out, "{} {} {}", s.name, s.offset, shape);
        }
        out
    }

    pub fn parse_manifest(text: &str) -> Result<Self> {
        let mut layout = ParamLayout::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = || Error::Config(format!("layout line {}: `{line}`", lineno + 1));
            let mut parts = line.split_whitespace();
            let name = parts.next().ok_or_else(bad)?;
            let offset: usize = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
            let shape = parts
                .next()
                .ok_or_else(bad)?
                .split('x')
                .map(|d| d.parse::<usize>().map_err(|_| bad()))
                .collect::<Result<Vec<_>>>()?;
            if offset != layout.len() {
                return Err(bad());
            }
            layout.push(name, &shape);
        }
        Ok(layout)
    }
}

/// A flat parameter vector together with its layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlatParams {
    pub flat: DVector<f64>,
    pub layout: ParamLayout,
}

impl FlatParams {
    pub fn zeros(layout: ParamLayout) -> Self {
        Self {
            flat: DVector::zeros(layout.len()),
            layout,
        }
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    pub fn slice(&self, name: &str) -> &[f64] {
        let s = self.layout.get(name).unwrap_or_else(|| panic!("no slice `{name}`"));
        &self.flat.as_slice()[s.range()]
    }

    pub fn slice_mut(&mut self, name: &str) -> &mut [f64] {
        let r = self
            .layout
            .get(name)
            .unwrap_or_else(|| panic!("no slice `{name}`"))
            .range();
        &mut self.flat.as_mut_slice()[r]
    }

    /// Matrix view of a 2-d slice, stored column-major.
    pub fn matrix(&self, name: &str) -> DMatrix<f64> {
        let s = self.layout.get(name).unwrap_or_else(|| panic!("no slice `{name}`"));
        let (r, c) = match s.shape.as_slice() {
            [r, c] => (*r, *c),
            [n] => (*n, 1),
            _ => panic!("slice `{name}` is not a matrix"),
        };
        DMatrix::from_column_slice(r, c, &self.flat.as_slice()[s.range()])
    }

    pub fn set_matrix(&mut self, name: &str, m: &DMatrix<f64>) {
        self.slice_mut(name).copy_from_slice(m.as_slice());
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.flat.len() * 8);
        for v in self.flat.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(stem.with_extension("bin"), bytes)?;
        fs::write(stem.with_extension("layout"), self.layout.manifest())?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let layout = ParamLayout::parse_manifest(&fs::read_to_string(stem.with_extension("layout"))?)?;
        let bytes = fs::read(stem.with_extension("bin"))?;
        if bytes.len() != layout.len() * 8 {
            return Err(Error::DimensionMismatch {
                expected: layout.len() * 8,
                got: bytes.len(),
            });
        }
        let flat = DVector::from_iterator(
            layout.len(),
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))),
        );
        Ok(Self { flat, layout })
    }
}
