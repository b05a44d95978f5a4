//! Reader for the subset of the MATPOWER `.m` case format used here.
//!
//! Recognized assignments: `mpc.baseMVA`, `mpc.bus`, `mpc.gen`, `mpc.branch`,
//! `mpc.gencost` (polynomial model only, at most quadratic), plus two
//! extensions: `mpc.wind` with rows `[bus capacity_mw forecast_mw power_factor]`
//! and `mpc.reservecost` with one `[up down]` price row per generator. Other
//! assignments are skipped.

use super::{BusType, RawBranch, RawBus, RawCase, RawGenerator, RawWind};
use crate::error::{Error, Result};
use crate::case_io::Network;

struct Token {
    line: usize,
    value: f64,
}

type Row = Vec<Token>;

struct Assignment {
    line: usize,
    rows: Vec<Row>,
}

fn strip_comment(line: &str) -> &str {
    let mut in_str = false;
    for (i, c) in line.char_indices() {
        match c {
            '\'' => in_str = !in_str,
            '%' | '#' if !in_str => return &line[..i],
            _ => {}
        }
    }
    line
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse { line, message: message.into() }
}

/// Split the file into `mpc.<field> = ...;` assignments with numeric content.
fn scan(text: &str) -> Result<(String, Vec<(String, Assignment)>)> {
    let mut name = String::from("case");
    let mut out = Vec::new();
    let lines: Vec<&str> = text.lines().collect();
    let mut i = 0;
    while i < lines.len() {
        let lineno = i + 1;
        let line = strip_comment(lines[i]).trim();
        i += 1;
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("function") {
            if let Some(pos) = rest.find('=') {
                name = rest[pos + 1..].trim().trim_end_matches(';').to_string();
            }
            continue;
        }
        let Some(rest) = line.strip_prefix("mpc.") else {
            continue;
        };
        let Some(eq) = rest.find('=') else {
            return Err(parse_err(lineno, format!("expected assignment, found `{line}`")));
        };
        let field = rest[..eq].trim().to_string();
        let rhs = rest[eq + 1..].trim();
        if rhs.starts_with('\'') || rhs.starts_with('"') {
            continue;
        }
        if rhs.starts_with('{') {
            // Cell arrays (bus names and similar) are skipped.
            let mut body = rhs.to_string();
            while !body.contains('}') && i < lines.len() {
                body = strip_comment(lines[i]).to_string();
                i += 1;
            }
            continue;
        }
        if let Some(after) = rhs.strip_prefix('[') {
            let mut rows: Vec<Row> = Vec::new();
            let mut current: Row = Vec::new();
            let mut chunk = after.to_string();
            let mut chunk_line = lineno;
            loop {
                let (body, done) = match chunk.find(']') {
                    Some(p) => (chunk[..p].to_string(), true),
                    None => (chunk.clone(), false),
                };
                for (k, piece) in body.split(';').enumerate() {
                    if k > 0 && !current.is_empty() {
                        rows.push(std::mem::take(&mut current));
                    }
                    for tok in piece.split(|c: char| c.is_whitespace() || c == ',').filter(|t| !t.is_empty()) {
                        let value = parse_number(tok).ok_or_else(|| {
                            parse_err(chunk_line, format!("mpc.{field}: cannot parse number `{tok}`"))
                        })?;
                        current.push(Token { line: chunk_line, value });
                    }
                }
                // A line break ends a matrix row as well.
                if !current.is_empty() {
                    rows.push(std::mem::take(&mut current));
                }
                if done {
                    break;
                }
                if i >= lines.len() {
                    return Err(parse_err(lineno, format!("mpc.{field}: unterminated matrix")));
                }
                chunk = strip_comment(lines[i]).to_string();
                chunk_line = i + 1;
                i += 1;
            }
            out.push((field, Assignment { line: lineno, rows }));
        } else {
            let body = rhs.trim_end_matches(';').trim();
            let value = parse_number(body)
                .ok_or_else(|| parse_err(lineno, format!("mpc.{field}: cannot parse value `{body}`")))?;
            out.push((field, Assignment { line: lineno, rows: vec![vec![Token { line: lineno, value }]] }));
        }
    }
    Ok((name, out))
}

fn parse_number(tok: &str) -> Option<f64> {
    match tok {
        "Inf" | "inf" => Some(f64::INFINITY),
        "-Inf" | "-inf" => Some(f64::NEG_INFINITY),
        _ => tok.parse().ok(),
    }
}

fn need_cols(field: &str, a: &Assignment, min: usize) -> Result<()> {
    for row in &a.rows {
        if row.len() < min {
            let line = row.first().map(|t| t.line).unwrap_or(a.line);
            return Err(parse_err(line, format!("mpc.{field}: row has {} columns, need at least {min}", row.len())));
        }
    }
    Ok(())
}

fn as_index(field: &str, tok: &Token) -> Result<usize> {
    if tok.value >= 0.0 && tok.value.fract() == 0.0 {
        Ok(tok.value as usize)
    } else {
        Err(parse_err(tok.line, format!("mpc.{field}: expected a bus number, found {}", tok.value)))
    }
}

pub fn parse_matpower(text: &str) -> Result<Network> {
    let (name, fields) = scan(text)?;
    let get = |f: &str| fields.iter().find(|(n, _)| n == f).map(|(_, a)| a);
    let missing = |f: &str| parse_err(0, format!("missing mpc.{f}"));

    let base = get("baseMVA").ok_or_else(|| missing("baseMVA"))?;
    let base_mva = base.rows[0][0].value;

    let bus = get("bus").ok_or_else(|| missing("bus"))?;
    need_cols("bus", bus, 13)?;
    let mut buses = Vec::new();
    for row in &bus.rows {
        let kind = match row[1].value as i64 {
            1 => BusType::Pq,
            2 => BusType::Pv,
            3 => BusType::Reference,
            other => return Err(parse_err(row[1].line, format!("mpc.bus: unsupported bus type {other}"))),
        };
        buses.push(RawBus {
            id: as_index("bus", &row[0])?,
            kind,
            pd: row[2].value,
            qd: row[3].value,
            gs: row[4].value,
            bs: row[5].value,
            vm: row[7].value,
            va_deg: row[8].value,
            vmax: row[11].value,
            vmin: row[12].value,
        });
    }

    let gen = get("gen").ok_or_else(|| missing("gen"))?;
    need_cols("gen", gen, 10)?;
    let cost = get("gencost").ok_or_else(|| missing("gencost"))?;
    if cost.rows.len() < gen.rows.len() {
        return Err(parse_err(cost.line, "mpc.gencost: fewer rows than generators"));
    }
    let reserve = get("reservecost");
    if let Some(r) = reserve {
        need_cols("reservecost", r, 2)?;
        if r.rows.len() != gen.rows.len() {
            return Err(parse_err(r.line, "mpc.reservecost: need one row per generator"));
        }
    }
    let mut generators = Vec::new();
    for (g, row) in gen.rows.iter().enumerate() {
        let c = &cost.rows[g];
        if c.len() < 4 {
            return Err(parse_err(c[0].line, "mpc.gencost: row too short"));
        }
        if c[0].value as i64 != 2 {
            return Err(parse_err(c[0].line, "mpc.gencost: only polynomial cost (model 2) is supported"));
        }
        let n = c[3].value as usize;
        if n > 3 || c.len() < 4 + n {
            return Err(parse_err(c[0].line, "mpc.gencost: only polynomials up to degree 2 are supported"));
        }
        let coef = |power: usize| if power < n { c[4 + n - 1 - power].value } else { 0.0 };
        generators.push(RawGenerator {
            bus: as_index("gen", &row[0])?,
            pg: row[1].value,
            qg: row[2].value,
            qmax: row[3].value,
            qmin: row[4].value,
            vg: row[5].value,
            in_service: row[7].value > 0.0,
            pmax: row[8].value,
            pmin: row[9].value,
            c2: coef(2),
            c1: coef(1),
            c0: coef(0),
            reserve: reserve.map(|r| (r.rows[g][0].value, r.rows[g][1].value)),
        });
    }

    let branch = get("branch").ok_or_else(|| missing("branch"))?;
    need_cols("branch", branch, 11)?;
    let mut branches = Vec::new();
    for row in &branch.rows {
        branches.push(RawBranch {
            from: as_index("branch", &row[0])?,
            to: as_index("branch", &row[1])?,
            r: row[2].value,
            x: row[3].value,
            b: row[4].value,
            rate_mw: row[5].value,
            tap: row[8].value,
            shift_deg: row[9].value,
            in_service: row[10].value > 0.0,
        });
    }

    let mut wind = Vec::new();
    if let Some(w) = get("wind") {
        need_cols("wind", w, 3)?;
        for row in &w.rows {
            wind.push(RawWind {
                bus: as_index("wind", &row[0])?,
                capacity_mw: row[1].value,
                forecast_mw: row[2].value,
                power_factor: row.get(3).map(|t| t.value).unwrap_or(1.0),
            });
        }
    }

    RawCase { name, base_mva, buses, branches, generators, wind }.into_network()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ieee14_wind_shape() {
        let net = parse_matpower(include_str!("../../data/ieee14_wind.m")).unwrap();
        assert_eq!(net.n_buses(), 14);
        assert_eq!(net.branches.len(), 20);
        assert_eq!(net.n_generators(), 5);
        assert_eq!(net.n_wind(), 4);
        for (w, bus) in net.wind_farms.iter().zip([11, 12, 13, 14]) {
            assert_eq!(net.buses[w.bus].id, bus);
            assert!((w.forecast - 0.18).abs() < 1e-15);
            assert!((w.capacity - 0.36).abs() < 1e-15);
        }
        assert!(net.branches.iter().all(|b| b.rate == Some(0.4)));
        assert_eq!(net.partition.pv.len(), 4);
        assert_eq!(net.partition.pq.len(), 9);
    }

    #[test]
    fn ieee118_shape() {
        let net = parse_matpower(include_str!("../../data/ieee118_wind.m")).unwrap();
        assert_eq!(net.n_buses(), 118);
        assert_eq!(net.branches.len(), 186);
        assert_eq!(net.n_generators(), 54);
        assert_eq!(net.n_wind(), 18);
    }

    #[test]
    fn bad_number_reports_line() {
        let text = "mpc.baseMVA = 100;\nmpc.bus = [\n 1 3 0 0 0 0 1 1 0 230 1 1.1 0.9;\n 2 1 x 0 0 0 1 1 0 230 1 1.1 0.9;\n];";
        match parse_matpower(text) {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 4);
                assert!(message.contains("`x`"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_section_is_reported() {
        let err = parse_matpower("mpc.baseMVA = 100;").unwrap_err();
        assert!(err.to_string().contains("mpc.bus"));
    }

    #[test]
    fn parsing_is_deterministic() {
        let text = include_str!("../../data/ieee14_wind.m");
        assert_eq!(parse_matpower(text).unwrap(), parse_matpower(text).unwrap());
    }
}
