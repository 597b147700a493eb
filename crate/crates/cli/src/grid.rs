//! Parsing of `--grid` values.
//!
//! Accepted forms are a comma-separated list (`1,2,5.5`) and an inclusive
//! range `start:stop` or `start:stop:step` with a default step of 1.

use std::str::FromStr;

#[derive(Clone, Debug, PartialEq)]
pub struct Grid(pub Vec<f64>);

fn number(s: &str) -> Result<f64, String> {
    let v: f64 = s.trim().parse().map_err(|_| format!("'{s}' is not a number"))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("'{s}' is not finite"))
    }
}

impl FromStr for Grid {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s.contains(':') {
            let parts: Vec<&str> = s.split(':').collect();
            let (start, stop, step) = match parts.as_slice() {
                [a, b] => (number(a)?, number(b)?, 1.0),
                [a, b, c] => (number(a)?, number(b)?, number(c)?),
                _ => return Err(format!("'{s}' is not start:stop[:step]")),
            };
            if !(step > 0.0) || stop < start {
                return Err(format!("'{s}' describes an empty range"));
            }
            let n = ((stop - start) / step + 1e-9).floor() as usize;
            return Ok(Grid((0..=n).map(|i| start + i as f64 * step).collect()));
        }
        let values = s.split(',').map(number).collect::<Result<Vec<_>, _>>()?;
        Ok(Grid(values))
    }
}
