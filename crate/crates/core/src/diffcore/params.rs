//! Flat parameter storage with named matrix segments.

use std::path::Path;

use serde_json::{json, Map, Value};

use super::mat::Mat;
use super::tape::{Grads, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// All trainable values of a model, laid out as consecutive named segments.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Vec<Segment>,
}

impl ParamVector {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a zero-filled segment.
    pub fn push_segment(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> Result<()> {
        let name = name.into();
        if self.layout.iter().any(|s| s.name == name) {
            return Err(Error::config(format!("duplicate parameter segment {name}")));
        }
        let offset = self.values.len();
        self.values.resize(offset + rows * cols, 0.0);
        self.layout.push(Segment { name, offset, rows, cols });
        Ok(())
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn layout(&self) -> &[Segment] {
        &self.layout
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.layout.iter().find(|s| s.name == name)
    }

    fn require(&self, name: &str) -> Result<&Segment> {
        self.segment(name)
            .ok_or_else(|| Error::config(format!("unknown parameter segment {name}")))
    }

    pub fn get(&self, name: &str) -> Result<&[f64]> {
        let seg = self.require(name)?;
        Ok(&self.values[seg.range()])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut [f64]> {
        let range = self.require(name)?.range();
        Ok(&mut self.values[range])
    }

    pub fn mat(&self, name: &str) -> Result<Mat> {
        let seg = self.require(name)?;
        Mat::from_vec(seg.rows, seg.cols, self.values[seg.range()].to_vec())
    }

    /// A vector with the same layout, filled with zeros.
    pub fn zeros_like(&self) -> Self {
        ParamVector { values: vec![0.0; self.values.len()], layout: self.layout.clone() }
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        self.layout == other.layout
    }

    /// Puts every segment on the tape as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> ParamVars {
        let vars = self
            .layout
            .iter()
            .map(|s| {
                let m = Mat::from_vec(s.rows, s.cols, self.values[s.range()].to_vec()).expect("segment shape");
                tape.leaf(m)
            })
            .collect();
        ParamVars { layout: self.layout.clone(), vars }
    }

    /// Checkpoint document: segment name -> {shape, values}, in layout order.
    pub fn to_json(&self) -> Value {
        let mut map = Map::new();
        for s in &self.layout {
            map.insert(
                s.name.clone(),
                json!({ "shape": [s.rows, s.cols], "values": &self.values[s.range()] }),
            );
        }
        Value::Object(map)
    }

    pub fn from_json(value: &Value) -> Result<Self> {
        let obj = value.as_object().ok_or_else(|| Error::config("checkpoint must be an object"))?;
        let mut out = ParamVector::new();
        for (name, entry) in obj {
            let shape: [usize; 2] = serde_json::from_value(entry.get("shape").cloned().unwrap_or(Value::Null))
                .map_err(|e| Error::config(format!("segment {name}: bad shape: {e}")))?;
            let vals: Vec<f64> = serde_json::from_value(entry.get("values").cloned().unwrap_or(Value::Null))
                .map_err(|e| Error::config(format!("segment {name}: bad values: {e}")))?;
            if vals.len() != shape[0] * shape[1] {
                return Err(Error::shape(format!(
                    "segment {name}: {} values for shape {shape:?}",
                    vals.len()
                )));
            }
            out.push_segment(name.clone(), shape[0], shape[1])?;
            out.get_mut(name)?.copy_from_slice(&vals);
        }
        Ok(out)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&self.to_json()).expect("serializable")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json_string() + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&serde_json::from_str(&text)?)
    }

    /// Copies values from `other` into the segments of the same name and shape.
    pub fn assign_from(&mut self, other: &ParamVector) -> Result<()> {
        if other.layout.len() != self.layout.len() {
            return Err(Error::config("checkpoint segment count does not match the model"));
        }
        for s in self.layout.clone() {
            let o = other.require(&s.name)?;
            if (o.rows, o.cols) != (s.rows, s.cols) {
                return Err(Error::shape(format!("segment {} has a different shape", s.name)));
            }
            self.values[s.range()].copy_from_slice(&other.values[o.range()]);
        }
        Ok(())
    }
}

/// Tape handles for every segment of a [`ParamVector`].
#[derive(Clone, Debug)]
pub struct ParamVars {
    layout: Vec<Segment>,
    vars: Vec<Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Var {
        let i = self
            .layout
            .iter()
            .position(|s| s.name == name)
            .unwrap_or_else(|| panic!("parameter segment {name} is not bound"));
        self.vars[i]
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.layout.iter().position(|s| s.name == name).map(|i| self.vars[i])
    }

    /// Copy in which segments matching `freeze` are constants holding their current values.
    pub fn frozen(&self, tape: &mut Tape, freeze: impl Fn(&str) -> bool) -> ParamVars {
        let vars = self
            .layout
            .iter()
            .zip(&self.vars)
            .map(|(s, &v)| if freeze(&s.name) { tape.constant(tape.value(v).clone()) } else { v })
            .collect();
        ParamVars { layout: self.layout.clone(), vars }
    }

    /// Gathers the adjoints of every segment into a vector with the original layout.
    pub fn gradient(&self, tape: &Tape, grads: &Grads) -> ParamVector {
        let mut values = Vec::with_capacity(self.layout.iter().map(Segment::len).sum());
        for (s, &v) in self.layout.iter().zip(&self.vars) {
            match grads.get(v) {
                Some(g) => values.extend_from_slice(g.as_slice()),
                None => values.extend(std::iter::repeat(0.0).take(s.len())),
            }
            debug_assert_eq!(tape.shape(v), (s.rows, s.cols));
        }
        ParamVector { values, layout: self.layout.clone() }
    }
}

/// Value and gradient of a scalar program with respect to `params`.
pub fn grad<F>(params: &ParamVector, f: F) -> Result<(f64, ParamVector)>
where
    F: FnOnce(&mut Tape, &ParamVars) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    Ok((tape.value(out).item(), vars.gradient(&tape, &grads)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> ParamVector {
        let mut p = ParamVector::new();
        p.push_segment("a", 2, 2).unwrap();
        p.push_segment("b", 1, 3).unwrap();
        p.values_mut().copy_from_slice(&[1.0, -2.0, 0.1, 1e-300, 3.5, -0.0, f64::MAX]);
        p
    }

    #[test]
    fn segments_are_disjoint_and_cover() {
        let p = sample();
        let mut next = 0;
        for s in p.layout() {
            assert_eq!(s.offset, next);
            next += s.len();
        }
        assert_eq!(next, p.len());
    }

    #[test]
    fn duplicate_segment_rejected() {
        let mut p = sample();
        assert!(p.push_segment("a", 1, 1).is_err());
    }

    #[test]
    fn quadratic_gradient() {
        let mut p = ParamVector::new();
        p.push_segment("p", 1, 2).unwrap();
        p.values_mut().copy_from_slice(&[1.0, -2.0]);
        let (v, g) = grad(&p, |t, vars| {
            let sq = t.square(vars.get("p"));
            Ok(t.sum(sq))
        })
        .unwrap();
        assert_eq!(v, 5.0);
        assert_eq!(g.values(), &[2.0, -4.0]);
        assert!(g.same_layout(&p));
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let p = sample();
        let (_, g) = grad(&p, |t, _| Ok(t.constant(Mat::scalar(3.0)))).unwrap();
        assert!(g.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_scalar_program_is_a_contract_violation() {
        let p = sample();
        let r = grad(&p, |_, vars| Ok(vars.get("a")));
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    proptest! {
        #[test]
        fn checkpoint_round_trip_is_bit_exact(vals in proptest::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 7)) {
            let mut p = sample();
            p.values_mut().copy_from_slice(&vals);
            let text = p.to_json_string();
            let back = ParamVector::from_json(&serde_json::from_str(&text).unwrap()).unwrap();
            prop_assert_eq!(back.layout(), p.layout());
            for (a, b) in back.values().iter().zip(p.values()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
