//! Value parsers for flags that take structured values.

use branchdev_core::devlab::EpsSet;
use branchdev_core::Statistic;

/// `--eps 0.5` sets every statistic; `--eps next:0.5,ratio:0.25,tail:0.01`
/// sets them separately, and omitted keys keep their defaults.
pub fn parse_eps(text: &str) -> Result<EpsSet, String> {
    let defaults = branchdev_core::devlab::BatteryConfig::default().eps;
    let positive = |v: &str| -> Result<f64, String> {
        let x: f64 = v.trim().parse().map_err(|_| format!("`{v}` is not a number"))?;
        if x > 0.0 && x.is_finite() {
            Ok(x)
        } else {
            Err(format!("eps must be positive, got {x}"))
        }
    };
    if !text.contains(':') {
        let x = positive(text)?;
        return Ok(EpsSet {
            next: x,
            ratio: x,
            tail: x,
        });
    }
    let mut eps = defaults;
    for part in text.split(',') {
        let (key, value) = part
            .split_once(':')
            .ok_or_else(|| format!("expected key:value, got `{part}`"))?;
        let x = positive(value)?;
        match key.trim() {
            "next" => eps.next = x,
            "ratio" => eps.ratio = x,
            "tail" => eps.tail = x,
            other => return Err(format!("unknown eps key `{other}` (next, ratio, tail)")),
        }
    }
    Ok(eps)
}

/// Two comma-separated reals, e.g. `--l=1,-1`.
pub fn parse_pair(text: &str) -> Result<[f64; 2], String> {
    let parts: Vec<&str> = text.split(',').collect();
    let [a, b] = parts.as_slice() else {
        return Err(format!("expected two comma-separated numbers, got `{text}`"));
    };
    let num = |v: &str| v.trim().parse::<f64>().map_err(|_| format!("`{v}` is not a number"));
    let pair = [num(a)?, num(b)?];
    if pair.iter().all(|x| x.is_finite()) {
        Ok(pair)
    } else {
        Err("l must be finite".into())
    }
}

/// A comma-separated list of statistics, parsed as one flag value.
#[derive(Clone, Debug)]
pub struct Statistics(pub Vec<Statistic>);

pub fn parse_statistics(text: &str) -> Result<Statistics, String> {
    text.split(',')
        .map(|s| s.trim().parse::<Statistic>().map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()
        .map(Statistics)
}

pub fn parse_start_type(text: &str) -> Result<usize, String> {
    match text {
        "1" => Ok(0),
        "2" => Ok(1),
        _ => Err(format!("start type is 1 or 2, got `{text}`")),
    }
}

pub fn parse_quantile(text: &str) -> Result<f64, String> {
    let q: f64 = text.parse().map_err(|_| format!("`{text}` is not a number"))?;
    if q > 0.0 && q < 1.0 {
        Ok(q)
    } else {
        Err(format!("quantile must lie in (0, 1), got {q}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eps_forms() {
        let all = parse_eps("0.3").unwrap();
        assert_eq!([all.next, all.ratio, all.tail], [0.3; 3]);
        let mixed = parse_eps("next:0.15,tail:0.005").unwrap();
        assert_eq!(mixed.next, 0.15);
        assert_eq!(mixed.tail, 0.005);
        assert_eq!(mixed.ratio, branchdev_core::devlab::BatteryConfig::default().eps.ratio);
        assert!(parse_eps("0").is_err());
        assert!(parse_eps("width:1").is_err());
    }

    #[test]
    fn pairs_and_types() {
        assert_eq!(parse_pair("1,-1").unwrap(), [1.0, -1.0]);
        assert!(parse_pair("1").is_err());
        assert!(parse_pair("1,x").is_err());
        assert_eq!(parse_start_type("2").unwrap(), 1);
        assert!(parse_start_type("0").is_err());
        assert_eq!(parse_statistics("dev-next,y-tail").unwrap().0.len(), 2);
        assert!(parse_quantile("1").is_err());
    }
}
