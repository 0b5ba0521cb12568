//! MATPOWER case-file subset.

use super::{series_admittance, BusSpec, CaseError, GenSpec, GridCase, LineSpec, DEFAULT_ANGLE_LIMIT};

const BUS_COLUMNS: &[usize] = &[13, 17];
const GEN_COLUMNS: &[usize] = &[10, 21, 25];
const BRANCH_COLUMNS: &[usize] = &[13, 17, 21];

const REF_BUS: f64 = 3.0;
const ISOLATED_BUS: f64 = 4.0;
const POLYNOMIAL_COST: f64 = 2.0;

#[derive(Default)]
struct Blocks {
    base_mva: Option<f64>,
    bus: Option<Vec<Vec<f64>>>,
    gen: Option<Vec<Vec<f64>>>,
    branch: Option<Vec<Vec<f64>>>,
    gencost: Option<Vec<Vec<f64>>>,
}

fn malformed(block: &str, row: usize, reason: impl Into<String>) -> CaseError {
    CaseError::MalformedBlock { block: block.to_string(), row, reason: reason.into() }
}

fn strip_comments(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for line in text.lines() {
        let mut in_quote = false;
        for ch in line.chars() {
            match ch {
                '\'' => in_quote = !in_quote,
                '%' | '#' if !in_quote => break,
                _ => {}
            }
            out.push(ch);
        }
        out.push('\n');
    }
    out
}

fn parse_matrix(block: &str, body: &str) -> Result<Vec<Vec<f64>>, CaseError> {
    let mut rows = Vec::new();
    for raw in body.split(|c| c == ';' || c == '\n') {
        let tokens: Vec<&str> =
            raw.split(|c: char| c.is_whitespace() || c == ',').filter(|t| !t.is_empty()).collect();
        if tokens.is_empty() {
            continue;
        }
        let row_no = rows.len() + 1;
        let row = tokens
            .iter()
            .map(|t| {
                t.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| malformed(block, row_no, format!("`{t}` is not a finite number")))
            })
            .collect::<Result<Vec<f64>, _>>()?;
        rows.push(row);
    }
    Ok(rows)
}

fn tokenize_statements(text: &str) -> Result<Blocks, CaseError> {
    let text = strip_comments(text);
    let mut blocks = Blocks::default();
    let mut rest = text.as_str();
    while let Some(start) = rest.find("mpc.") {
        let after = &rest[start + 4..];
        let eq = after.find('=').ok_or_else(|| malformed("mpc", 0, "assignment without `=`"))?;
        let name = after[..eq].trim();
        let rhs = after[eq + 1..].trim_start();
        let (value, remainder) = if let Some(inner) = rhs.strip_prefix('[') {
            let close = inner.find(']').ok_or_else(|| malformed(name, 0, "unterminated matrix"))?;
            (&inner[..close], &inner[close + 1..])
        } else {
            let end = rhs.find(|c| c == ';' || c == '\n').unwrap_or(rhs.len());
            (&rhs[..end], &rhs[end..])
        };
        rest = remainder;
        match name {
            "version" => {
                let v = value.trim().trim_matches('\'');
                if v != "2" {
                    return Err(CaseError::UnsupportedFeature(format!("case format version {v}")));
                }
            }
            "baseMVA" => {
                let v = value.trim().parse::<f64>().map_err(|_| malformed("baseMVA", 1, "not a number"))?;
                blocks.base_mva = Some(v);
            }
            "bus" => blocks.bus = Some(parse_matrix("bus", value)?),
            "gen" => blocks.gen = Some(parse_matrix("gen", value)?),
            "branch" => blocks.branch = Some(parse_matrix("branch", value)?),
            "gencost" => blocks.gencost = Some(parse_matrix("gencost", value)?),
            other => return Err(CaseError::UnsupportedFeature(format!("`mpc.{other}` block"))),
        }
    }
    Ok(blocks)
}

fn check_columns(block: &str, rows: &[Vec<f64>], allowed: &[usize]) -> Result<(), CaseError> {
    if rows.is_empty() {
        return Err(malformed(block, 0, "block is empty"));
    }
    let width = rows[0].len();
    if !allowed.contains(&width) {
        return Err(malformed(block, 1, format!("{width} columns, expected one of {allowed:?}")));
    }
    for (i, r) in rows.iter().enumerate() {
        if r.len() != width {
            return Err(malformed(block, i + 1, format!("{} columns, other rows have {width}", r.len())));
        }
    }
    Ok(())
}

fn as_index(block: &str, row: usize, v: f64) -> Result<usize, CaseError> {
    if v >= 1.0 && v.fract() == 0.0 {
        Ok(v as usize)
    } else {
        Err(malformed(block, row, format!("`{v}` is not a bus number")))
    }
}

/// Parses a MATPOWER case. Branch series impedances become admittances
/// `g = r/(r²+x²)`, `b = −x/(r²+x²)`; bus and line-charging shunts are dropped.
pub fn parse_matpower_case(text: &str) -> Result<GridCase, CaseError> {
    let blocks = tokenize_statements(text)?;
    let base_power = blocks.base_mva.ok_or_else(|| malformed("baseMVA", 0, "missing"))?;
    let bus_rows = blocks.bus.ok_or_else(|| malformed("bus", 0, "missing"))?;
    let gen_rows = blocks.gen.ok_or_else(|| malformed("gen", 0, "missing"))?;
    let branch_rows = blocks.branch.ok_or_else(|| malformed("branch", 0, "missing"))?;
    let cost_rows = blocks.gencost.ok_or_else(|| malformed("gencost", 0, "missing"))?;
    check_columns("bus", &bus_rows, BUS_COLUMNS)?;
    check_columns("gen", &gen_rows, GEN_COLUMNS)?;
    check_columns("branch", &branch_rows, BRANCH_COLUMNS)?;
    if !(base_power > 0.0) {
        return Err(malformed("baseMVA", 1, "must be positive"));
    }

    let mut slack = None;
    let mut buses = Vec::with_capacity(bus_rows.len());
    for (i, r) in bus_rows.iter().enumerate() {
        let index = as_index("bus", i + 1, r[0])?;
        let kind = r[1];
        if kind == ISOLATED_BUS {
            return Err(CaseError::UnsupportedFeature(format!("isolated bus {index}")));
        }
        if ![1.0, 2.0, REF_BUS].contains(&kind) {
            return Err(malformed("bus", i + 1, format!("unknown bus type {kind}")));
        }
        if kind == REF_BUS {
            if slack.replace(index).is_some() {
                return Err(CaseError::InconsistentTopology("more than one reference bus".into()));
            }
        }
        if r[4] != 0.0 || r[5] != 0.0 {
            log::debug!("bus {index}: shunt (Gs={}, Bs={}) ignored", r[4], r[5]);
        }
        buses.push(BusSpec {
            index,
            p_demand: r[2] / base_power,
            q_demand: r[3] / base_power,
            v_min: r[12],
            v_max: r[11],
        });
    }
    let slack_bus = slack.ok_or_else(|| CaseError::InconsistentTopology("no reference bus".into()))?;

    if cost_rows.len() != gen_rows.len() {
        return Err(CaseError::UnsupportedFeature(format!(
            "{} gencost rows for {} generators (only active-power costs are supported)",
            cost_rows.len(),
            gen_rows.len()
        )));
    }
    let mut generators = Vec::with_capacity(gen_rows.len());
    let mut slack_voltage = None;
    for (i, (r, c)) in gen_rows.iter().zip(&cost_rows).enumerate() {
        let bus = as_index("gen", i + 1, r[0])?;
        if r[7] <= 0.0 {
            return Err(CaseError::UnsupportedFeature(format!("out-of-service generator at bus {bus}")));
        }
        if bus == slack_bus {
            slack_voltage = Some(r[5]);
        }
        let (cost_quadratic, cost_linear) = parse_cost_row(i + 1, c)?;
        generators.push(GenSpec {
            bus,
            p_min: r[9] / base_power,
            p_max: r[8] / base_power,
            q_min: r[4] / base_power,
            q_max: r[3] / base_power,
            cost_quadratic,
            cost_linear,
        });
    }

    let mut lines = Vec::with_capacity(branch_rows.len());
    for (i, r) in branch_rows.iter().enumerate() {
        let from = as_index("branch", i + 1, r[0])?;
        let to = as_index("branch", i + 1, r[1])?;
        let (res, react) = (r[2], r[3]);
        if res == 0.0 && react == 0.0 {
            return Err(malformed("branch", i + 1, "zero series impedance"));
        }
        if r[8] != 0.0 && r[8] != 1.0 {
            return Err(CaseError::UnsupportedFeature(format!("transformer tap ratio {} on branch ({from}, {to})", r[8])));
        }
        if r[9] != 0.0 {
            return Err(CaseError::UnsupportedFeature(format!("phase shift {} on branch ({from}, {to})", r[9])));
        }
        if r[10] <= 0.0 {
            return Err(CaseError::UnsupportedFeature(format!("out-of-service branch ({from}, {to})")));
        }
        let (conductance, susceptance) = series_admittance(res, react);
        lines.push(LineSpec { from, to, conductance, susceptance });
    }

    let mut case = GridCase {
        base_power,
        slack_bus,
        slack_voltage: slack_voltage.unwrap_or(1.0),
        angle_limit: DEFAULT_ANGLE_LIMIT,
        buses,
        lines,
        generators,
    };
    case.validate()?;
    Ok(case)
}

fn parse_cost_row(row: usize, c: &[f64]) -> Result<(f64, f64), CaseError> {
    if c.len() < 4 {
        return Err(malformed("gencost", row, format!("{} columns, need at least 4", c.len())));
    }
    if c[0] != POLYNOMIAL_COST {
        return Err(CaseError::UnsupportedFeature(format!("gencost model {} (only polynomial model 2)", c[0])));
    }
    let n = c[3];
    if !(n >= 1.0 && n.fract() == 0.0) {
        return Err(malformed("gencost", row, format!("invalid coefficient count {n}")));
    }
    let n = n as usize;
    if c.len() != 4 + n {
        return Err(malformed("gencost", row, format!("{} columns for {n} coefficients", c.len())));
    }
    if n > 3 {
        return Err(CaseError::UnsupportedFeature(format!("polynomial cost of degree {}", n - 1)));
    }
    let coeffs = &c[4..];
    let (quad, lin) = match n {
        3 => (coeffs[0], coeffs[1]),
        2 => (0.0, coeffs[0]),
        _ => (0.0, 0.0),
    };
    Ok((quad, lin))
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO_BUS: &str = "function mpc = two\n\
        mpc.version = '2';\n\
        mpc.baseMVA = 1;\n\
        mpc.bus = [\n\
          1 3 0 0 0 0 1 1 0 230 1 1.1 0.9;\n\
          2 1 50 10 0 0 1 1 0 230 1 1.1 0.9;\n\
        ];\n\
        mpc.gen = [ 1 0 0 100 -100 1 100 1 200 0; ];\n\
        mpc.branch = [ 1 2 0 0.1 0 0 0 0 0 0 1 -360 360; ];\n\
        mpc.gencost = [ 2 0 0 3 0.1 15 0; ];\n";

    #[test]
    fn two_bus_pure_reactance() {
        let case = parse_matpower_case(TWO_BUS).unwrap();
        assert_eq!(case.n_lines(), 1);
        assert_eq!(case.lines[0].conductance, 0.0);
        assert!((case.lines[0].susceptance + 10.0).abs() < 1e-12);
        assert!((case.buses[1].p_demand - 50.0).abs() < 1e-12);
        assert_eq!(case.generators[0].cost_linear, 15.0);
    }

    #[test]
    fn tap_ratio_is_unsupported() {
        let text = TWO_BUS.replace("1 2 0 0.1 0 0 0 0 0 0 1", "1 2 0 0.1 0 0 0 0 0.95 0 1");
        assert!(matches!(parse_matpower_case(&text), Err(CaseError::UnsupportedFeature(_))));
    }

    #[test]
    fn unknown_block_is_unsupported() {
        let text = format!("{TWO_BUS}mpc.areas = [1 1];\n");
        assert!(matches!(parse_matpower_case(&text), Err(CaseError::UnsupportedFeature(_))));
    }

    #[test]
    fn garbage_entry_is_malformed() {
        let text = TWO_BUS.replace("50 10", "5x 10");
        assert!(matches!(parse_matpower_case(&text), Err(CaseError::MalformedBlock { .. })));
    }

    #[test]
    fn piecewise_linear_cost_is_unsupported() {
        let text = TWO_BUS.replace("2 0 0 3 0.1 15 0", "1 0 0 2 0 0 100 1500");
        assert!(matches!(parse_matpower_case(&text), Err(CaseError::UnsupportedFeature(_))));
    }

    #[test]
    fn self_loop_is_inconsistent() {
        let text = TWO_BUS.replace("1 2 0 0.1", "2 2 0 0.1");
        assert!(matches!(parse_matpower_case(&text), Err(CaseError::InconsistentTopology(_))));
    }
}
