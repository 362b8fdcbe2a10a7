//! Textual parameter values: numbers, `[a,b,c]` vectors and `[a,b;c,d]`
//! matrices, and bare words.

use crate::graph::{BlockError, Value, ValueType};
use crate::linalg::Matrix;

/// Shortest representation that parses back to the same `f64`.
pub fn fmt_num(x: f64) -> String {
    format!("{x:?}").trim_end_matches(".0").to_string()
}

pub fn fmt_vector(v: &[f64]) -> String {
    let items: Vec<String> = v.iter().map(|&x| fmt_num(x)).collect();
    format!("[{}]", items.join(","))
}

pub fn fmt_matrix(m: &Matrix<f64>) -> String {
    let rows: Vec<String> = (0..m.rows())
        .map(|i| {
            m.row(i)
                .iter()
                .map(|&x| fmt_num(x))
                .collect::<Vec<_>>()
                .join(",")
        })
        .collect();
    format!("[{}]", rows.join(";"))
}

pub fn fmt_value(v: &Value) -> String {
    match v {
        Value::Scalar(x) => fmt_num(*x),
        Value::Vector(v) => fmt_vector(v),
        Value::Matrix(m) => fmt_matrix(m),
        Value::Image(i) => format!("image({},{})", i.rows(), i.cols()),
    }
}

fn bad(key: &str, value: &str) -> BlockError {
    BlockError::BadParam(format!("{key}={value}"))
}

pub fn parse_num(key: &str, s: &str) -> Result<f64, BlockError> {
    s.parse::<f64>().map_err(|_| bad(key, s))
}

/// Parses `[..]` into rows of numbers.
pub fn parse_grid(key: &str, s: &str) -> Result<Vec<Vec<f64>>, BlockError> {
    let inner = s
        .strip_prefix('[')
        .and_then(|t| t.strip_suffix(']'))
        .ok_or_else(|| bad(key, s))?;
    let rows: Vec<Vec<f64>> = inner
        .split(';')
        .map(|r| {
            r.split(',')
                .filter(|t| !t.trim().is_empty())
                .map(|t| parse_num(key, t.trim()))
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<_, _>>()?;
    let width = rows.first().map_or(0, Vec::len);
    if width == 0 || rows.iter().any(|r| r.len() != width) {
        return Err(bad(key, s));
    }
    Ok(rows)
}

/// A scalar, a `[a,b]` vector or a `[a,b;c,d]` matrix.
pub fn parse_value(key: &str, s: &str) -> Result<Value, BlockError> {
    if !s.starts_with('[') {
        return parse_num(key, s).map(Value::Scalar);
    }
    let rows = parse_grid(key, s)?;
    if rows.len() == 1 && !s.contains(';') {
        return Ok(Value::Vector(rows.into_iter().next().unwrap_or_default()));
    }
    Ok(Value::Matrix(Matrix::from_rows(&rows)))
}

pub fn parse_matrix(key: &str, s: &str) -> Result<Matrix<f64>, BlockError> {
    Ok(Matrix::from_rows(&parse_grid(key, s)?))
}

/// `key=value` pairs with consumption tracking, so leftovers can be
/// reported as unknown parameters.
#[derive(Debug, Clone, Default)]
pub struct Params {
    items: Vec<(String, String)>,
}

impl Params {
    pub fn new(items: Vec<(String, String)>) -> Self {
        Self { items }
    }

    /// Splits `key=value` words.
    pub fn parse<'a>(words: impl IntoIterator<Item = &'a str>) -> Result<Self, BlockError> {
        let items = words
            .into_iter()
            .map(|w| {
                w.split_once('=')
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .ok_or_else(|| BlockError::BadParam(format!("expected key=value, got {w:?}")))
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { items })
    }

    pub fn take(&mut self, key: &str) -> Option<String> {
        let i = self.items.iter().position(|(k, _)| k == key)?;
        Some(self.items.remove(i).1)
    }

    pub fn num(&mut self, key: &str, default: f64) -> Result<f64, BlockError> {
        match self.take(key) {
            Some(v) => parse_num(key, &v),
            None => Ok(default),
        }
    }

    pub fn required_num(&mut self, key: &str) -> Result<f64, BlockError> {
        let v = self
            .take(key)
            .ok_or_else(|| BlockError::BadParam(format!("missing {key}")))?;
        parse_num(key, &v)
    }

    pub fn value(&mut self, key: &str, default: Value) -> Result<Value, BlockError> {
        match self.take(key) {
            Some(v) => parse_value(key, &v),
            None => Ok(default),
        }
    }

    pub fn value_type(&mut self, default: ValueType) -> Result<ValueType, BlockError> {
        match self.take("type") {
            Some(v) => v.parse().map_err(BlockError::BadParam),
            None => Ok(default),
        }
    }

    pub fn count(&mut self, key: &str, default: usize) -> Result<usize, BlockError> {
        match self.take(key) {
            Some(v) => v.parse().map_err(|_| bad(key, &v)),
            None => Ok(default),
        }
    }

    pub fn into_items(self) -> Vec<(String, String)> {
        self.items
    }

    /// Removes and returns every remaining pair, in order.
    pub fn drain(&mut self) -> Vec<(String, String)> {
        std::mem::take(&mut self.items)
    }

    /// Fails when any parameter was not consumed.
    pub fn finish(self, kind: &str) -> Result<(), BlockError> {
        match self.items.first() {
            Some((k, _)) => Err(BlockError::BadParam(format!(
                "{kind} has no parameter {k:?}"
            ))),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbers_round_trip() {
        for x in [0.5, 5.0, -2.0, 1e-20, 0.1 + 0.2, 1.0 / 27.0] {
            assert_eq!(parse_num("k", &fmt_num(x)).unwrap(), x);
        }
        assert_eq!(fmt_num(5.0), "5");
        assert_eq!(fmt_num(0.5), "0.5");
    }

    #[test]
    fn arrays() {
        assert_eq!(
            parse_value("v", "[1,2,3]").unwrap(),
            Value::Vector(vec![1.0, 2.0, 3.0])
        );
        let m = parse_matrix("m", "[1,2;3,4]").unwrap();
        assert_eq!(fmt_matrix(&m), "[1,2;3,4]");
        assert!(parse_grid("m", "[1,2;3]").is_err());
        assert!(parse_value("v", "[1,x]").is_err());
    }

    #[test]
    fn leftovers_are_errors() {
        let mut p = Params::parse(["a=1", "b=2"]).unwrap();
        assert_eq!(p.num("a", 0.0).unwrap(), 1.0);
        assert!(p.finish("K").is_err());
        assert!(Params::parse(["oops"]).is_err());
    }
}
