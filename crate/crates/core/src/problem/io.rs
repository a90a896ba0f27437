//! JSON problem documents and CSV traces.

use std::path::Path;

use serde_json::{json, Map, Value};

use super::{cost_to_date, CoefficientFn, LqProblem, ProblemKind, SimulationTrace, TimeGrid};
use crate::error::{Error, Result};
use crate::linalg::{Mat, Vector};

fn parse_err(path: &str, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_string(),
        message: message.into(),
    }
}

fn field<'a>(obj: &'a Map<String, Value>, name: &str) -> Result<&'a Value> {
    obj.get(name)
        .ok_or_else(|| parse_err(&format!("$.{name}"), "missing field"))
}

fn number(v: &Value, path: &str) -> Result<f64> {
    v.as_f64()
        .ok_or_else(|| parse_err(path, format!("expected a number, got {v}")))
}

fn vector(v: &Value, path: &str) -> Result<Vec<f64>> {
    let items = v
        .as_array()
        .ok_or_else(|| parse_err(path, "expected an array of numbers"))?;
    items
        .iter()
        .enumerate()
        .map(|(i, x)| number(x, &format!("{path}[{i}]")))
        .collect()
}

fn matrix(v: &Value, path: &str) -> Result<Mat> {
    let rows = v
        .as_array()
        .ok_or_else(|| parse_err(path, "expected an array of rows"))?;
    let parsed: Vec<Vec<f64>> = rows
        .iter()
        .enumerate()
        .map(|(i, r)| vector(r, &format!("{path}[{i}]")))
        .collect::<Result<_>>()?;
    let ncols = parsed.first().map(|r| r.len()).unwrap_or(0);
    if let Some(i) = parsed.iter().position(|r| r.len() != ncols) {
        return Err(parse_err(
            &format!("{path}[{i}]"),
            format!("ragged row: expected {ncols} entries"),
        ));
    }
    Ok(Mat::from_fn(parsed.len(), ncols, |i, j| parsed[i][j]))
}

fn coefficient(v: &Value, path: &str) -> Result<CoefficientFn> {
    let obj = v
        .as_object()
        .ok_or_else(|| parse_err(path, "expected {\"const\": ...} or {\"samples\": ...}"))?;
    match (obj.get("const"), obj.get("samples")) {
        (Some(c), None) => Ok(CoefficientFn::Constant(matrix(c, &format!("{path}.const"))?)),
        (None, Some(s)) => {
            let items = s
                .as_array()
                .ok_or_else(|| parse_err(&format!("{path}.samples"), "expected an array"))?;
            if items.is_empty() {
                return Err(parse_err(&format!("{path}.samples"), "no samples"));
            }
            let samples = items
                .iter()
                .enumerate()
                .map(|(k, m)| matrix(m, &format!("{path}.samples[{k}]")))
                .collect::<Result<Vec<_>>>()?;
            Ok(CoefficientFn::Sampled(samples))
        }
        _ => Err(parse_err(
            path,
            "exactly one of \"const\" or \"samples\" is required",
        )),
    }
}

/// Parse a problem document. Syntax errors report `line:column`; schema
/// errors report a `$.field[...]` path.
pub fn load_problem(document: &str) -> Result<LqProblem> {
    let root: Value = serde_json::from_str(document).map_err(|e| {
        parse_err(
            &format!("line {}, column {}", e.line(), e.column()),
            e.to_string(),
        )
    })?;
    let obj = root
        .as_object()
        .ok_or_else(|| parse_err("$", "expected an object"))?;

    let kind = match field(obj, "kind")?.as_str() {
        Some("deterministic") => ProblemKind::Deterministic,
        Some("stochastic") => ProblemKind::Stochastic,
        _ => {
            return Err(parse_err(
                "$.kind",
                "expected \"deterministic\" or \"stochastic\"",
            ))
        }
    };
    let t0 = number(field(obj, "t0")?, "$.t0")?;
    let t_final = number(field(obj, "T")?, "$.T")?;
    let n_steps = field(obj, "n_steps")?
        .as_u64()
        .ok_or_else(|| parse_err("$.n_steps", "expected a non-negative integer"))?
        as usize;
    let x0 = Vector::from_vec(vector(field(obj, "x0")?, "$.x0")?);
    let coef = |name: &str| coefficient(field(obj, name)?, &format!("$.{name}"));
    let optional = |name: &str| -> Result<Option<CoefficientFn>> {
        obj.get(name)
            .map(|v| coefficient(v, &format!("$.{name}")))
            .transpose()
    };
    let h = matrix(field(obj, "H")?, "$.H")?;

    Ok(LqProblem {
        kind,
        grid: TimeGrid {
            t0,
            t_final,
            n_steps,
        },
        x0,
        a: coef("A")?,
        b: coef("B")?,
        q: coef("Q")?,
        r: coef("R")?,
        abar: optional("Abar")?,
        bbar: optional("Bbar")?,
        h,
    })
}

pub fn load_problem_file(path: impl AsRef<Path>) -> Result<LqProblem> {
    let text = std::fs::read_to_string(path)?;
    load_problem(&text)
}

fn matrix_value(m: &Mat) -> Value {
    Value::Array(
        m.row_iter()
            .map(|r| Value::from(r.iter().copied().collect::<Vec<f64>>()))
            .collect(),
    )
}

fn coefficient_value(c: &CoefficientFn) -> Value {
    match c {
        CoefficientFn::Constant(m) => json!({ "const": matrix_value(m) }),
        CoefficientFn::Sampled(v) => {
            json!({ "samples": v.iter().map(matrix_value).collect::<Vec<_>>() })
        }
    }
}

pub fn save_problem(p: &LqProblem) -> String {
    let mut obj = Map::new();
    let kind = match p.kind {
        ProblemKind::Deterministic => "deterministic",
        ProblemKind::Stochastic => "stochastic",
    };
    obj.insert("kind".into(), kind.into());
    obj.insert("t0".into(), p.grid.t0.into());
    obj.insert("T".into(), p.grid.t_final.into());
    obj.insert("n_steps".into(), p.grid.n_steps.into());
    obj.insert(
        "x0".into(),
        Value::from(p.x0.iter().copied().collect::<Vec<f64>>()),
    );
    obj.insert("A".into(), coefficient_value(&p.a));
    obj.insert("B".into(), coefficient_value(&p.b));
    if let Some(abar) = &p.abar {
        obj.insert("Abar".into(), coefficient_value(abar));
    }
    if let Some(bbar) = &p.bbar {
        obj.insert("Bbar".into(), coefficient_value(bbar));
    }
    obj.insert("Q".into(), coefficient_value(&p.q));
    obj.insert("R".into(), coefficient_value(&p.r));
    obj.insert("H".into(), matrix_value(&p.h));
    serde_json::to_string_pretty(&Value::Object(obj)).expect("JSON values always serialize")
}

pub fn save_problem_file(p: &LqProblem, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, save_problem(p))?;
    Ok(())
}

/// Trace as CSV: `t,x_0..,u_0..,cost_to_date`, plus a trailing `dw` column
/// (increment over the step starting at that node) for stochastic traces.
/// The last row's `cost_to_date` includes the terminal term.
pub fn trace_to_csv(p: &LqProblem, trace: &SimulationTrace) -> Result<String> {
    let running = cost_to_date(p, trace)?;
    let (n, m) = (p.n(), p.m());
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["t".to_string()];
    header.extend((0..n).map(|i| format!("x_{i}")));
    header.extend((0..m).map(|i| format!("u_{i}")));
    header.push("cost_to_date".into());
    if trace.noise_increments.is_some() {
        header.push("dw".into());
    }
    w.write_record(&header)?;
    let last = trace.times.len() - 1;
    for k in 0..=last {
        let mut row = vec![trace.times[k].to_string()];
        row.extend(trace.states[k].iter().map(|v| v.to_string()));
        row.extend(trace.controls[k].iter().map(|v| v.to_string()));
        let mut cost = running[k];
        if k == last {
            let x = &trace.states[k];
            cost += x.dot(&(&p.h * x));
        }
        row.push(cost.to_string());
        if let Some(dw) = &trace.noise_increments {
            row.push(dw.get(k).copied().unwrap_or(0.0).to_string());
        }
        w.write_record(&row)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Io(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("CSV output is UTF-8"))
}

/// Inverse of [`trace_to_csv`] for a state of dimension `n` and control of
/// dimension `m`. The realized cost is taken from the last `cost_to_date`.
pub fn read_trace_csv(text: &str, n: usize, m: usize) -> Result<SimulationTrace> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let header = reader.headers()?.clone();
    let base = 1 + n + m + 1;
    let has_dw = match header.len() {
        len if len == base => false,
        len if len == base + 1 => true,
        len => {
            return Err(parse_err(
                "header",
                format!("expected {base} or {} columns, got {len}", base + 1),
            ))
        }
    };
    let mut trace = SimulationTrace {
        times: Vec::new(),
        states: Vec::new(),
        controls: Vec::new(),
        noise_increments: has_dw.then(Vec::new),
        realized_cost: 0.0,
    };
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let values: Vec<f64> = record
            .iter()
            .enumerate()
            .map(|(j, s)| {
                s.trim().parse::<f64>().map_err(|e| {
                    parse_err(&format!("row {}, column {}", line + 2, j + 1), e.to_string())
                })
            })
            .collect::<Result<_>>()?;
        trace.times.push(values[0]);
        trace
            .states
            .push(Vector::from_column_slice(&values[1..1 + n]));
        trace
            .controls
            .push(Vector::from_column_slice(&values[1 + n..1 + n + m]));
        trace.realized_cost = values[1 + n + m];
        if let Some(dw) = trace.noise_increments.as_mut() {
            dw.push(values[base]);
        }
    }
    if let Some(dw) = trace.noise_increments.as_mut() {
        dw.pop();
    }
    if trace.times.is_empty() {
        return Err(parse_err("row 2", "trace has no rows"));
    }
    Ok(trace)
}
