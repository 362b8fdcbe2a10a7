use super::{Expr, ExprNode};

/// Light normalization: constant folding, identity elimination (`x + 0`,
/// `x * 1`, `x * 0`), flattening of nested sums and products, merging of
/// like terms and of repeated factors into powers.
///
/// There is no canonical ordering; the contract is that the result
/// evaluates to the same number as the input wherever the input evaluates.
pub fn simplify(e: &Expr) -> Expr {
    match e.node() {
        ExprNode::Constant(_) | ExprNode::Variable(_) => e.clone(),
        ExprNode::Add(ops) => simplify_add(ops.iter().map(simplify).collect()),
        ExprNode::Mul(ops) => simplify_mul(ops.iter().map(simplify).collect()),
        ExprNode::Neg(a) => simplify_neg(simplify(a)),
        ExprNode::Div(a, b) => simplify_div(simplify(a), simplify(b), b),
        ExprNode::Pow(a, n) => simplify_pow(simplify(a), *n),
    }
}

/// Splits a simplified term into `coefficient * key`. `None` as key means
/// the term is the bare constant.
fn split_coefficient(e: &Expr) -> (f64, Option<Expr>) {
    match e.node() {
        ExprNode::Constant(c) => (*c, None),
        ExprNode::Neg(a) => {
            let (c, key) = split_coefficient(a);
            (-c, key)
        }
        ExprNode::Mul(ops) => match ops[0].as_constant() {
            Some(c) => (c, Some(Expr::product(ops[1..].to_vec()))),
            None => (1.0, Some(e.clone())),
        },
        _ => (1.0, Some(e.clone())),
    }
}

fn scaled(coef: f64, key: Expr) -> Expr {
    if coef == 1.0 {
        return key;
    }
    if coef == -1.0 {
        return Expr::negate(key);
    }
    let mut factors = vec![Expr::constant(coef)];
    match key.node() {
        ExprNode::Mul(ops) => factors.extend(ops.iter().cloned()),
        _ => factors.push(key),
    }
    Expr::product(factors)
}

fn simplify_add(operands: Vec<Expr>) -> Expr {
    let mut flat = Vec::with_capacity(operands.len());
    let mut stack: Vec<Expr> = operands.into_iter().rev().collect();
    while let Some(e) = stack.pop() {
        match e.node() {
            ExprNode::Add(inner) => stack.extend(inner.iter().rev().cloned()),
            _ => flat.push(e),
        }
    }

    let mut constant = 0.0;
    let mut groups: Vec<(Expr, f64)> = Vec::new();
    for term in &flat {
        match split_coefficient(term) {
            (c, None) => constant += c,
            (c, Some(key)) => match groups.iter_mut().find(|(k, _)| *k == key) {
                Some((_, coef)) => *coef += c,
                None => groups.push((key, c)),
            },
        }
    }

    let mut terms: Vec<Expr> = groups
        .into_iter()
        .filter(|&(_, c)| c != 0.0)
        .map(|(key, c)| scaled(c, key))
        .collect();
    if constant != 0.0 {
        terms.push(Expr::constant(constant));
    }
    Expr::sum(terms)
}

fn simplify_mul(operands: Vec<Expr>) -> Expr {
    let mut coef = 1.0;
    let mut bases: Vec<(Expr, i32)> = Vec::new();
    let mut stack: Vec<Expr> = operands.into_iter().rev().collect();
    while let Some(e) = stack.pop() {
        let (base, exp) = match e.node() {
            ExprNode::Mul(inner) => {
                stack.extend(inner.iter().rev().cloned());
                continue;
            }
            ExprNode::Neg(a) => {
                coef = -coef;
                stack.push(a.clone());
                continue;
            }
            ExprNode::Constant(c) => {
                coef *= c;
                continue;
            }
            ExprNode::Pow(b, n) => (b.clone(), *n),
            _ => (e.clone(), 1),
        };
        match bases.iter_mut().find(|(b, _)| *b == base) {
            Some((_, n)) => match n.checked_add(exp) {
                Some(sum) => *n = sum,
                None => bases.push((base, exp)),
            },
            None => bases.push((base, exp)),
        }
    }

    if coef == 0.0 {
        return Expr::zero();
    }
    let factors: Vec<Expr> = bases
        .into_iter()
        .filter(|&(_, n)| n != 0)
        .map(|(b, n)| if n == 1 { b } else { Expr::pow(b, n) })
        .collect();
    if factors.is_empty() {
        return Expr::constant(coef);
    }
    scaled(coef, Expr::product(factors))
}

fn simplify_neg(a: Expr) -> Expr {
    match a.node() {
        ExprNode::Constant(c) => Expr::constant(-c),
        ExprNode::Neg(inner) => inner.clone(),
        ExprNode::Mul(ops) => match ops[0].as_constant() {
            Some(c) => scaled(-c, Expr::product(ops[1..].to_vec())),
            None => Expr::negate(a),
        },
        _ => Expr::negate(a),
    }
}

fn simplify_div(num: Expr, den: Expr, original_den: &Expr) -> Expr {
    if den.is_constant(0.0) {
        // The denominator folds to zero; keep it unfolded so the node stays
        // valid and evaluation still reports the singularity.
        return Expr::from_node(ExprNode::Div(num, original_den.clone()));
    }
    if den.is_constant(1.0) {
        return num;
    }
    if num.is_constant(0.0) {
        return Expr::zero();
    }
    if let (Some(a), Some(b)) = (num.as_constant(), den.as_constant()) {
        return Expr::constant(a / b);
    }
    Expr::from_node(ExprNode::Div(num, den))
}

fn simplify_pow(base: Expr, n: i32) -> Expr {
    if n == 0 {
        return Expr::one();
    }
    if n == 1 {
        return base;
    }
    match base.node() {
        ExprNode::Constant(c) if !(n < 0 && *c == 0.0) => Expr::constant(c.powi(n)),
        ExprNode::Pow(b, m) => match m.checked_mul(n) {
            Some(k) => simplify_pow(b.clone(), k),
            None => Expr::pow(base, n),
        },
        _ => Expr::pow(base, n),
    }
}
