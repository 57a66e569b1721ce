use std::collections::VecDeque;
use std::io::{Read, Write};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub next: Vec<f64>,
}

/// FIFO transition store with a hard capacity.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    state_dim: usize,
    action_dim: usize,
    data: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub const DEFAULT_CAPACITY: usize = 100_000;

    pub fn new(state_dim: usize, action_dim: usize, capacity: usize) -> Result<Self> {
        if capacity == 0 || state_dim == 0 || action_dim == 0 {
            return Err(Error::invalid("replay buffer dimensions and capacity must be positive"));
        }
        Ok(Self {
            capacity,
            state_dim,
            action_dim,
            data: VecDeque::with_capacity(capacity.min(4096)),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn push(&mut self, x: &[f64], u: &[f64], next: &[f64]) -> Result<()> {
        if x.len() != self.state_dim || next.len() != self.state_dim || u.len() != self.action_dim {
            return Err(Error::invalid("transition dimensions do not match the buffer"));
        }
        if self.data.len() == self.capacity {
            self.data.pop_front();
        }
        self.data.push_back(Transition {
            x: x.to_vec(),
            u: u.to_vec(),
            next: next.to_vec(),
        });
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.data.iter()
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.data.get(i)
    }

    fn header(&self) -> Vec<String> {
        let mut h = Vec::new();
        h.extend((0..self.state_dim).map(|i| format!("x_{i}")));
        h.extend((0..self.action_dim).map(|i| format!("u_{i}")));
        h.extend((0..self.state_dim).map(|i| format!("xp_{i}")));
        h
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(self.header())?;
        for t in &self.data {
            let row: Vec<String> =
                t.x.iter()
                    .chain(&t.u)
                    .chain(&t.next)
                    .map(|v| format!("{v:?}"))
                    .collect();
            w.write_record(row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a CSV with header `x_0..,u_0..,xp_0..`; dimensions are taken
    /// from the header.
    pub fn read_csv<R: Read>(reader: R, capacity: usize) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let headers = r.headers()?.clone();
        let count = |prefix: &str| {
            headers
                .iter()
                .filter(|h| h.strip_prefix(prefix).is_some_and(|rest| rest.parse::<usize>().is_ok()))
                .count()
        };
        let (dx, du, dp) = (count("x_"), count("u_"), count("xp_"));
        if dx == 0 || du == 0 || dx != dp || headers.len() != dx + du + dp {
            return Err(Error::Format("buffer CSV header must be x_*, u_*, xp_*".into()));
        }
        let mut buf = ReplayBuffer::new(dx, du, capacity)?;
        let expected = buf.header();
        if headers.iter().zip(&expected).any(|(a, b)| a != b) {
            return Err(Error::Format("buffer CSV columns out of order".into()));
        }
        for rec in r.records() {
            let rec = rec?;
            let vals: Vec<f64> = rec
                .iter()
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::Format(format!("bad number `{s}`: {e}")))
                })
                .collect::<Result<_>>()?;
            buf.push(&vals[..dx], &vals[dx..dx + du], &vals[dx + du..])?;
        }
        Ok(buf)
    }
}
