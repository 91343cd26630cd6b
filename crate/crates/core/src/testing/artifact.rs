//! Line-oriented text form of test artifacts. Values are written with
//! shortest round-trip formatting, so reading gives back identical bits.

use std::fmt::Write as _;

use crate::error::{LabError, Result};
use crate::tensor::Tensor;
use crate::testing::fingerprint::Fingerprint;
use crate::testing::oneshot::OneShotVector;

fn join<T: std::fmt::Debug>(v: &[T]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ")
}

impl OneShotVector {
    pub fn to_text(&self) -> String {
        let mut s = String::from("oneshot v1\n");
        let _ = writeln!(s, "shape {}", join(self.x_star.shape()));
        let _ = writeln!(s, "monitored {}", join(&self.monitored_layers));
        let _ = writeln!(s, "stat_fault_free {:?}", self.stat_fault_free);
        let _ = writeln!(s, "tau {:?}", self.tau);
        let _ = writeln!(s, "values {}", join(self.x_star.data()));
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let f = Fields::parse(text, "oneshot v1")?;
        let shape: Vec<usize> = f.list("shape")?;
        let values: Vec<f64> = f.list("values")?;
        Ok(Self {
            x_star: Tensor::new(shape, values).map_err(|e| LabError::Parse { line: f.line("values"), detail: e.to_string() })?,
            monitored_layers: f.list("monitored")?,
            stat_fault_free: f.scalar("stat_fault_free")?,
            tau: f.scalar("tau")?,
        })
    }
}

impl Fingerprint {
    pub fn to_text(&self) -> String {
        let mut s = String::from("fingerprint v1\n");
        let _ = writeln!(s, "shape {}", self.f_target.len());
        let _ = writeln!(s, "lambda {:?}", self.lambda);
        let _ = writeln!(s, "tol {:?}", self.tol);
        let _ = writeln!(s, "values {}", join(&self.f_target));
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let f = Fields::parse(text, "fingerprint v1")?;
        let n: usize = f.scalar("shape")?;
        let f_target: Vec<f64> = f.list("values")?;
        if f_target.len() != n {
            return Err(LabError::Parse { line: f.line("values"), detail: format!("expected {n} values, got {}", f_target.len()) });
        }
        Ok(Self { f_target, lambda: f.scalar("lambda")?, tol: f.scalar("tol")? })
    }
}

struct Fields<'a> {
    entries: Vec<(usize, &'a str, &'a str)>,
}

impl<'a> Fields<'a> {
    fn parse(text: &'a str, header: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == header => {}
            other => {
                return Err(LabError::Parse {
                    line: 1,
                    detail: format!("expected header {header:?}, got {:?}", other.map(|l| l.1)),
                })
            }
        }
        let entries = lines
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                let l = l.trim();
                let (k, v) = l.split_once(' ').unwrap_or((l, ""));
                (i + 1, k, v.trim())
            })
            .collect();
        Ok(Self { entries })
    }

    fn get(&self, key: &str) -> Result<(usize, &'a str)> {
        self.entries
            .iter()
            .find(|e| e.1 == key)
            .map(|e| (e.0, e.2))
            .ok_or_else(|| LabError::Parse { line: self.entries.last().map_or(1, |e| e.0), detail: format!("missing field {key:?}") })
    }

    fn line(&self, key: &str) -> usize {
        self.get(key).map_or(0, |e| e.0)
    }

    fn scalar<T: std::str::FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let (line, v) = self.get(key)?;
        v.parse().map_err(|e| LabError::Parse { line, detail: format!("{key}: {e}") })
    }

    fn list<T: std::str::FromStr>(&self, key: &str) -> Result<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        let (line, v) = self.get(key)?;
        v.split_whitespace()
            .map(|t| t.parse().map_err(|e| LabError::Parse { line, detail: format!("{key}: {e}") }))
            .collect()
    }
}
