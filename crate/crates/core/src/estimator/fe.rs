//! Categorical groupings and fixed-effect absorption by alternating projections.

use std::collections::HashMap;
use std::hash::Hash;

use rayon::prelude::*;

use crate::error::{Error, Result};

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 10_000;

/// Dense group labels for each row. Labels are assigned in order of first
/// appearance, so two groupings describe the same partition exactly when
/// their label vectors are equal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grouping {
    ids: Vec<u32>,
    n_groups: usize,
}

impl Grouping {
    pub fn from_keys<K, I>(keys: I) -> Self
    where
        K: Hash + Eq,
        I: IntoIterator<Item = K>,
    {
        let mut seen: HashMap<K, u32> = HashMap::new();
        let ids = keys
            .into_iter()
            .map(|k| {
                let next = seen.len() as u32;
                *seen.entry(k).or_insert(next)
            })
            .collect();
        Grouping { ids, n_groups: seen.len() }
    }

    /// Every row in one group.
    pub fn single(n: usize) -> Self {
        Grouping { ids: vec![0; n], n_groups: usize::from(n > 0) }
    }

    /// Every row its own group.
    pub fn singletons(n: usize) -> Self {
        Grouping { ids: (0..n as u32).collect(), n_groups: n }
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn n_groups(&self) -> usize {
        self.n_groups
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0usize; self.n_groups];
        for &g in &self.ids {
            c[g as usize] += 1;
        }
        c
    }

    /// Rows sharing a group in both groupings.
    pub fn intersect(&self, other: &Grouping) -> Grouping {
        assert_eq!(self.len(), other.len(), "groupings over different rows");
        Grouping::from_keys(self.ids.iter().zip(&other.ids).map(|(&a, &b)| (a, b)))
    }

    pub fn same_partition(&self, other: &Grouping) -> bool {
        self.ids == other.ids
    }

    /// Keeps the listed rows and relabels densely.
    pub fn subset(&self, rows: &[usize]) -> Grouping {
        Grouping::from_keys(rows.iter().map(|&r| self.ids[r]))
    }
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Connected components of the bipartite graph linking the groups of `a` and
/// `b` through shared rows.
pub fn connected_components(a: &Grouping, b: &Grouping) -> usize {
    let na = a.n_groups();
    let mut parent: Vec<usize> = (0..na + b.n_groups()).collect();
    for (&ga, &gb) in a.ids().iter().zip(b.ids()) {
        let (ra, rb) = (find(&mut parent, ga as usize), find(&mut parent, na + gb as usize));
        if ra != rb {
            parent[ra] = rb;
        }
    }
    (0..parent.len()).filter(|&i| find(&mut parent, i) == i).count()
}

/// Parameters absorbed by the fixed effects. Exact for one or two dimensions;
/// each further dimension is charged its group count minus one.
pub fn absorbed_df(dims: &[Grouping]) -> usize {
    match dims {
        [] => 0,
        [a] => a.n_groups(),
        [a, b, rest @ ..] => {
            let two = a.n_groups() + b.n_groups() - connected_components(a, b);
            two + rest.iter().map(|d| d.n_groups().saturating_sub(1)).sum::<usize>()
        }
    }
}

/// Sweeps group means out of one column until the largest mean removed in a
/// full pass falls below `tol`. Returns the number of passes.
fn demean_column(col: &mut [f64], dims: &[(&Grouping, Vec<f64>)], tol: f64, max_iter: usize) -> Result<usize> {
    let mut sums: Vec<Vec<f64>> = dims.iter().map(|(g, _)| vec![0.0; g.n_groups()]).collect();
    let mut delta = f64::INFINITY;
    for iter in 1..=max_iter {
        delta = 0.0;
        for ((g, inv_count), sum) in dims.iter().zip(sums.iter_mut()) {
            sum.iter_mut().for_each(|s| *s = 0.0);
            for (v, &id) in col.iter().zip(g.ids()) {
                sum[id as usize] += v;
            }
            for (s, ic) in sum.iter_mut().zip(inv_count) {
                *s *= ic;
                delta = f64::max(delta, s.abs());
            }
            for (v, &id) in col.iter_mut().zip(g.ids()) {
                *v -= sum[id as usize];
            }
        }
        if dims.len() == 1 || delta < tol {
            return Ok(iter);
        }
    }
    Err(Error::NonConvergence { iterations: max_iter, delta })
}

/// Residualizes every column on the fixed effects in `dims`. Returns the
/// largest number of passes any column needed.
pub fn within_transform(columns: &mut [Vec<f64>], dims: &[Grouping], tol: f64, max_iter: usize) -> Result<usize> {
    if dims.is_empty() {
        return Err(Error::InvalidInput("at least one fixed-effect dimension is required".into()));
    }
    let n = dims[0].len();
    if dims.iter().any(|d| d.len() != n) || columns.iter().any(|c| c.len() != n) {
        return Err(Error::InvalidInput("fixed-effect dimensions and columns differ in length".into()));
    }
    let prepared: Vec<(&Grouping, Vec<f64>)> = dims
        .iter()
        .map(|g| (g, g.counts().into_iter().map(|c| 1.0 / c as f64).collect()))
        .collect();
    let iters = columns
        .par_iter_mut()
        .map(|col| demean_column(col, &prepared, tol, max_iter))
        .collect::<Result<Vec<usize>>>()?;
    Ok(iters.into_iter().max().unwrap_or(0))
}
