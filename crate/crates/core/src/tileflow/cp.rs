use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

/// Index of a variable inside a [`ConstraintProgram`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VarId(pub usize);

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Var {
    pub name: String,
    pub lo: i64,
    pub hi: i64,
}

impl Var {
    pub fn is_bool(&self) -> bool {
        self.lo == 0 && self.hi == 1
    }
}

/// Integer expression over program variables.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Expr {
    Const(i64),
    Var(VarId),
    Sum(Vec<Expr>),
    Product(Vec<Expr>),
    Max(Vec<Expr>),
    /// Rounds up to a multiple of the constant.
    AlignUp(Box<Expr>, i64),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Constraint {
    Eq(Expr, Expr),
    Le(Expr, Expr),
    /// The variable equals the expression (product and max definitions).
    Define(VarId, Expr),
    /// `var` is a multiple of `k` or equals `full`.
    MultipleOrFull { var: VarId, k: i64, full: i64 },
    /// Square block of booleans whose rows and columns each sum to one.
    /// `block[pos][item]` is set when `item` takes position `pos`.
    Permutation { block: Vec<Vec<VarId>> },
    /// Memory-load recurrence over a permuted overlap matrix: the item at
    /// position `j` sits on top of the highest earlier item overlapping it.
    /// `heights[j]` is the top of the item at position `j`.
    Tetris {
        level: String,
        block: Vec<Vec<VarId>>,
        overlap: Vec<Vec<bool>>,
        costs: Vec<Expr>,
        heights: Vec<VarId>,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Objective {
    pub maximize: Expr,
    /// Lexicographic tie-break, larger values preferred, in order.
    pub tie_break: Vec<VarId>,
}

/// Role of a size variable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SizeKind {
    /// Tile arena of a staged tensor.
    Tile,
    /// Kernel scratch.
    Transient,
}

/// Bytes a tensor occupies on one memory hop.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SizeVar {
    pub var: VarId,
    pub tensor: String,
    pub level: String,
    pub factor: i64,
    pub kind: SizeKind,
}

/// Variables, constraints and one objective.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstraintProgram {
    pub vars: Vec<Var>,
    pub constraints: Vec<Constraint>,
    pub objective: Option<Objective>,
    /// DimVar of `(tensor, dim)`.
    pub dim_vars: std::collections::BTreeMap<(String, usize), VarId>,
    pub size_vars: Vec<SizeVar>,
}

/// Value per variable, indexed by `VarId`.
pub type Assignment = Vec<i64>;

impl ConstraintProgram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_var(&mut self, name: impl Into<String>, lo: i64, hi: i64) -> VarId {
        self.vars.push(Var {
            name: name.into(),
            lo,
            hi,
        });
        VarId(self.vars.len() - 1)
    }

    pub fn add(&mut self, c: Constraint) {
        self.constraints.push(c);
    }

    pub fn var(&self, v: VarId) -> &Var {
        &self.vars[v.0]
    }

    pub fn dim_var(&self, tensor: &str, dim: usize) -> Option<VarId> {
        self.dim_vars.get(&(tensor.to_string(), dim)).copied()
    }

    /// Adds an `n × n` permutation block and returns it.
    pub fn add_permutation(&mut self, prefix: &str, n: usize) -> Vec<Vec<VarId>> {
        let block: Vec<Vec<VarId>> = (0..n)
            .map(|p| (0..n).map(|i| self.add_var(format!("{prefix}[{p}][{i}]"), 0, 1)).collect())
            .collect();
        self.add(Constraint::Permutation { block: block.clone() });
        block
    }

    /// Sets the objective; a program has exactly one.
    pub fn set_objective(&mut self, o: Objective) -> Result<(), String> {
        if self.objective.is_some() {
            return Err("objective already declared".into());
        }
        self.objective = Some(o);
        Ok(())
    }

    pub fn eval(&self, e: &Expr, a: &[i64]) -> i64 {
        match e {
            Expr::Const(c) => *c,
            Expr::Var(v) => a[v.0],
            Expr::Sum(t) => t.iter().map(|x| self.eval(x, a)).sum(),
            Expr::Product(t) => t.iter().map(|x| self.eval(x, a)).product(),
            Expr::Max(t) => t.iter().map(|x| self.eval(x, a)).max().unwrap_or(0),
            Expr::AlignUp(x, k) => {
                let v = self.eval(x, a);
                (v + k - 1).div_euclid(*k) * k
            }
        }
    }

    /// Variables referenced by an expression.
    pub fn expr_vars(e: &Expr, out: &mut Vec<VarId>) {
        match e {
            Expr::Const(_) => {}
            Expr::Var(v) => out.push(*v),
            Expr::Sum(t) | Expr::Product(t) | Expr::Max(t) => t.iter().for_each(|x| Self::expr_vars(x, out)),
            Expr::AlignUp(x, _) => Self::expr_vars(x, out),
        }
    }

    /// Structural check: every reference names a declared variable and the
    /// objective is present.
    pub fn well_formed(&self) -> Result<(), String> {
        let n = self.vars.len();
        let mut refs = Vec::new();
        for c in &self.constraints {
            match c {
                Constraint::Eq(a, b) | Constraint::Le(a, b) => {
                    Self::expr_vars(a, &mut refs);
                    Self::expr_vars(b, &mut refs);
                }
                Constraint::Define(v, e) => {
                    refs.push(*v);
                    Self::expr_vars(e, &mut refs);
                }
                Constraint::MultipleOrFull { var, .. } => refs.push(*var),
                Constraint::Permutation { block } => refs.extend(block.iter().flatten()),
                Constraint::Tetris {
                    block, costs, heights, ..
                } => {
                    refs.extend(block.iter().flatten());
                    refs.extend(heights);
                    costs.iter().for_each(|x| Self::expr_vars(x, &mut refs));
                }
            }
        }
        let o = self.objective.as_ref().ok_or("objective not declared")?;
        Self::expr_vars(&o.maximize, &mut refs);
        refs.extend(&o.tie_break);
        match refs.iter().find(|v| v.0 >= n) {
            Some(v) => Err(format!("constraint references undeclared variable #{}", v.0)),
            None => Ok(()),
        }
    }

    /// Replays every constraint on a full assignment.
    pub fn check(&self, a: &[i64]) -> Result<(), String> {
        if a.len() != self.vars.len() {
            return Err(format!("assignment has {} values for {} variables", a.len(), self.vars.len()));
        }
        for (v, x) in self.vars.iter().zip(a) {
            if *x < v.lo || *x > v.hi {
                return Err(format!("{} = {x} outside [{}, {}]", v.name, v.lo, v.hi));
            }
        }
        for (i, c) in self.constraints.iter().enumerate() {
            let ok = match c {
                Constraint::Eq(l, r) => self.eval(l, a) == self.eval(r, a),
                Constraint::Le(l, r) => self.eval(l, a) <= self.eval(r, a),
                Constraint::Define(v, e) => a[v.0] == self.eval(e, a),
                Constraint::MultipleOrFull { var, k, full } => a[var.0] % k == 0 || a[var.0] == *full,
                Constraint::Permutation { block } => decode_permutation(block, a).is_some(),
                Constraint::Tetris {
                    block,
                    overlap,
                    costs,
                    heights,
                    ..
                } => match decode_permutation(block, a) {
                    None => false,
                    Some(order) => {
                        let mut h = vec![0i64; order.len()];
                        let mut ok = true;
                        for j in 0..order.len() {
                            let base = (0..j).filter(|&i| overlap[order[j]][order[i]]).map(|i| h[i]).max().unwrap_or(0);
                            h[j] = base + self.eval(&costs[order[j]], a);
                            ok &= a[heights[j].0] == h[j];
                        }
                        ok
                    }
                },
            };
            if !ok {
                return Err(format!("constraint c{i} violated: {}", self.show(c)));
            }
        }
        Ok(())
    }

    pub fn objective_value(&self, a: &[i64]) -> Option<i64> {
        self.objective.as_ref().map(|o| self.eval(&o.maximize, a))
    }

    fn show_expr(&self, e: &Expr) -> String {
        let join = |t: &[Expr], sep: &str| t.iter().map(|x| self.show_expr(x)).collect::<Vec<_>>().join(sep);
        match e {
            Expr::Const(c) => c.to_string(),
            Expr::Var(v) => self.vars[v.0].name.clone(),
            Expr::Sum(t) => format!("({})", join(t, " + ")),
            Expr::Product(t) => format!("({})", join(t, " * ")),
            Expr::Max(t) => format!("max({})", join(t, ", ")),
            Expr::AlignUp(x, k) => format!("align{k}({})", self.show_expr(x)),
        }
    }

    fn show(&self, c: &Constraint) -> String {
        match c {
            Constraint::Eq(l, r) => format!("{} == {}", self.show_expr(l), self.show_expr(r)),
            Constraint::Le(l, r) => format!("{} <= {}", self.show_expr(l), self.show_expr(r)),
            Constraint::Define(v, e) => format!("{} := {}", self.vars[v.0].name, self.show_expr(e)),
            Constraint::MultipleOrFull { var, k, full } => {
                format!("{} % {k} == 0 or {} == {full}", self.vars[var.0].name, self.vars[var.0].name)
            }
            Constraint::Permutation { block } => format!(
                "permutation {}x{} over {}..",
                block.len(),
                block.len(),
                block.first().and_then(|r| r.first()).map(|v| self.vars[v.0].name.as_str()).unwrap_or("-")
            ),
            Constraint::Tetris { level, costs, .. } => format!(
                "tetris {level}: H[j] = max(H[i] : i < j, overlap) + C[j] over [{}]",
                costs.iter().map(|c| self.show_expr(c)).collect::<Vec<_>>().join(", ")
            ),
        }
    }
}

/// Order encoded by a permutation block, if it is one.
pub fn decode_permutation(block: &[Vec<VarId>], a: &[i64]) -> Option<Vec<usize>> {
    let n = block.len();
    let mut order = Vec::with_capacity(n);
    let mut col = vec![0; n];
    for row in block {
        let set: Vec<usize> = (0..n).filter(|&i| a[row[i].0] == 1).collect();
        if set.len() != 1 {
            return None;
        }
        col[set[0]] += 1;
        order.push(set[0]);
    }
    col.iter().all(|&c| c == 1).then_some(order)
}

/// Writes the values of a permutation block encoding `order`.
pub fn encode_permutation(block: &[Vec<VarId>], order: &[usize], a: &mut [i64]) {
    for (p, row) in block.iter().enumerate() {
        for (i, v) in row.iter().enumerate() {
            a[v.0] = i64::from(order[p] == i);
        }
    }
}

/// One variable or constraint per line.
impl fmt::Display for ConstraintProgram {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = String::new();
        for v in &self.vars {
            if v.is_bool() {
                writeln!(s, "bool {}", v.name)?;
            } else {
                writeln!(s, "int {} in [{}, {}]", v.name, v.lo, v.hi)?;
            }
        }
        for (i, c) in self.constraints.iter().enumerate() {
            writeln!(s, "c{i}: {}", self.show(c))?;
        }
        if let Some(o) = &self.objective {
            writeln!(s, "maximize {}", self.show_expr(&o.maximize))?;
            let tb: Vec<&str> = o.tie_break.iter().map(|v| self.vars[v.0].name.as_str()).collect();
            writeln!(s, "tie-break {}", tb.join(" > "))?;
        }
        f.write_str(&s)
    }
}
