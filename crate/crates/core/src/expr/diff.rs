use super::{simplify, Expr, ExprNode, Symbol};

/// Exact partial derivative of `e` with respect to `v`, simplified.
pub fn differentiate(e: &Expr, v: &Symbol) -> Expr {
    simplify(&derive(e, v))
}

fn derive(e: &Expr, v: &Symbol) -> Expr {
    if !e.contains(v) {
        return Expr::zero();
    }
    match e.node() {
        ExprNode::Constant(_) => Expr::zero(),
        ExprNode::Variable(s) => {
            if s == v {
                Expr::one()
            } else {
                Expr::zero()
            }
        }
        ExprNode::Add(ops) => Expr::sum(ops.iter().map(|a| derive(a, v)).collect()),
        ExprNode::Mul(ops) => {
            // Product rule over n factors.
            let terms = ops
                .iter()
                .enumerate()
                .filter(|(_, f)| f.contains(v))
                .map(|(i, f)| {
                    let mut factors = ops.clone();
                    factors[i] = derive(f, v);
                    Expr::product(factors)
                })
                .collect();
            Expr::sum(terms)
        }
        ExprNode::Neg(a) => Expr::negate(derive(a, v)),
        ExprNode::Div(a, b) => {
            if !b.contains(v) {
                return Expr::from_node(ExprNode::Div(derive(a, v), b.clone()));
            }
            let num = derive(a, v) * b.clone() - a.clone() * derive(b, v);
            Expr::from_node(ExprNode::Div(num, Expr::pow(b.clone(), 2)))
        }
        ExprNode::Pow(a, n) => {
            if *n == 0 {
                return Expr::zero();
            }
            Expr::product(vec![
                Expr::constant(*n as f64),
                Expr::pow(a.clone(), n - 1),
                derive(a, v),
            ])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::SymbolTable;

    fn v(n: &str) -> Expr {
        Expr::var(n)
    }

    #[test]
    fn loop_residual_jacobian() {
        let f = v("C") + v("G") * v("S") - v("S");
        let j = differentiate(&f, &Symbol::new("S"));
        assert_eq!(j.to_string(), "(G - 1)");
    }

    #[test]
    fn constant_rule() {
        assert_eq!(
            differentiate(&Expr::constant(4.2), &Symbol::new("x")),
            Expr::zero()
        );
        assert_eq!(differentiate(&v("c"), &Symbol::new("x")), Expr::zero());
    }

    #[test]
    fn power_rule() {
        let d = differentiate(&(v("x") * v("x")), &Symbol::new("x"));
        assert_eq!(d.to_string(), "(2 * x)");
        let d3 = differentiate(&Expr::pow(v("x"), 3), &Symbol::new("x"));
        assert_eq!(d3.to_string(), "(3 * (x ^ 2))");
    }

    #[test]
    fn quotient_rule() {
        // d/dx (1 / x) = -1 / x^2
        let e = Expr::div(Expr::one(), v("x")).unwrap();
        let d = differentiate(&e, &Symbol::new("x"));
        let t = SymbolTable::new().with("x", 2.0);
        assert_eq!(d.evaluate(&t).unwrap(), -0.25);
    }
}
