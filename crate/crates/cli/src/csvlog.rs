//! Trajectory logs as CSV. Floats are written with 17 significant digits
//! so that reading a file back reproduces every value bit for bit.

use std::io::{Read, Write};

use lintrack::mpc::{LogRow, SolveRecord};
use lintrack::qp::QpStatus;
use nalgebra::DVector;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CsvError {
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Format { line: u64, message: String },
}

/// Dimensions of a log: states, inputs and outputs of the plant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub n: usize,
    pub m: usize,
    pub p: usize,
}

const TAIL: [&str; 9] = [
    "J_N",
    "J_eq_lin",
    "V",
    "dist_lin",
    "dist_nl",
    "qp_status",
    "qp_iters",
    "t_model_s",
    "t_solve_s",
];

pub fn header(dims: Dims) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    for (prefix, count) in [("x", dims.n), ("u", dims.m), ("y", dims.p), ("xs", dims.n), ("us", dims.m), ("ys", dims.p)] {
        h.extend((1..=count).map(|i| format!("{prefix}{i}")));
    }
    h.extend(TAIL.iter().map(|s| s.to_string()));
    h
}

pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn push_vec(fields: &mut Vec<String>, v: Option<&DVector<f64>>, len: usize) {
    match v {
        Some(v) => fields.extend(v.iter().map(|x| format_float(*x))),
        None => fields.extend(std::iter::repeat_n(String::new(), len)),
    }
}

pub fn record(row: &LogRow, dims: Dims) -> Vec<String> {
    let mut f = vec![row.t.to_string()];
    push_vec(&mut f, Some(&row.x), dims.n);
    push_vec(&mut f, row.u.as_ref(), dims.m);
    push_vec(&mut f, row.y.as_ref(), dims.p);
    let s = row.solve.as_ref();
    push_vec(&mut f, s.map(|s| &s.x_s), dims.n);
    push_vec(&mut f, s.map(|s| &s.u_s), dims.m);
    push_vec(&mut f, s.map(|s| &s.y_s), dims.p);
    match s {
        Some(s) => {
            for v in [s.j_n, s.j_eq_lin, s.v, s.dist_lin, s.dist_nl] {
                f.push(format_float(v));
            }
            f.push(s.qp_status.as_str().to_string());
            f.push(s.qp_iterations.to_string());
            f.push(format_float(s.t_model_s));
            f.push(format_float(s.t_solve_s));
        }
        None => f.extend(std::iter::repeat_n(String::new(), TAIL.len())),
    }
    f
}

pub fn write_log<W: Write>(out: W, rows: &[LogRow], dims: Dims) -> Result<(), CsvError> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    w.write_record(header(dims))?;
    for row in rows {
        w.write_record(record(row, dims))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_log_file(path: &std::path::Path, rows: &[LogRow], dims: Dims) -> Result<(), CsvError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    write_log(std::fs::File::create(path)?, rows, dims)
}

/// Infer the dimensions from a header written by [`write_log`].
pub fn dims_from_header(head: &csv::StringRecord) -> Option<Dims> {
    let count = |prefix: &str| {
        head
            .iter()
            .filter(|h| h.strip_prefix(prefix).is_some_and(|r| !r.is_empty() && r.bytes().all(|b| b.is_ascii_digit())))
            .count()
    };
    let dims = Dims {
        n: count("x"),
        m: count("u"),
        p: count("y"),
    };
    let expected = header(dims);
    (head.len() == expected.len() && head.iter().zip(expected.iter()).all(|(a, b)| a == b)).then_some(dims)
}

struct Fields<'a> {
    rec: &'a csv::StringRecord,
    pos: usize,
    line: u64,
}

impl<'a> Fields<'a> {
    fn err(&self, message: impl Into<String>) -> CsvError {
        CsvError::Format {
            line: self.line,
            message: message.into(),
        }
    }

    fn next(&mut self) -> &'a str {
        let s = self.rec.get(self.pos).unwrap_or("");
        self.pos += 1;
        s
    }

    fn float(&mut self) -> Result<Option<f64>, CsvError> {
        let s = self.next();
        if s.is_empty() {
            return Ok(None);
        }
        s.parse()
            .map(Some)
            .map_err(|_| self.err(format!("`{s}` is not a number")))
    }

    fn vector(&mut self, len: usize) -> Result<Option<DVector<f64>>, CsvError> {
        let vals: Vec<Option<f64>> = (0..len).map(|_| self.float()).collect::<Result<_, _>>()?;
        if vals.iter().all(Option::is_none) {
            return Ok(None);
        }
        let full: Option<Vec<f64>> = vals.into_iter().collect();
        full.map(|v| Some(DVector::from_vec(v)))
            .ok_or_else(|| self.err("partially empty vector"))
    }

    fn required(&mut self, len: usize, what: &str) -> Result<DVector<f64>, CsvError> {
        self.vector(len)?.ok_or_else(|| self.err(format!("missing {what}")))
    }
}

pub fn parse_row(rec: &csv::StringRecord, dims: Dims, line: u64) -> Result<LogRow, CsvError> {
    let mut f = Fields { rec, pos: 0, line };
    if rec.len() != header(dims).len() {
        return Err(f.err(format!("expected {} fields, got {}", header(dims).len(), rec.len())));
    }
    let t_str = f.next();
    let t = t_str.parse().map_err(|_| f.err(format!("bad time index `{t_str}`")))?;
    let x = f.required(dims.n, "state")?;
    let u = f.vector(dims.m)?;
    let y = f.vector(dims.p)?;
    let x_s = f.vector(dims.n)?;
    let u_s = f.vector(dims.m)?;
    let y_s = f.vector(dims.p)?;
    let nums: Vec<Option<f64>> = (0..5).map(|_| f.float()).collect::<Result<_, _>>()?;
    let status = f.next().to_string();
    let iters = f.next().to_string();
    let t_model = f.float()?;
    let t_solve = f.float()?;
    let solve = match (x_s, u_s, y_s) {
        (Some(x_s), Some(u_s), Some(y_s)) => {
            let num = |i: usize| nums[i].ok_or_else(|| f.err(format!("missing {}", TAIL[i])));
            Some(SolveRecord {
                x_s,
                u_s,
                y_s,
                j_n: num(0)?,
                j_eq_lin: num(1)?,
                v: num(2)?,
                dist_lin: num(3)?,
                dist_nl: num(4)?,
                qp_status: status
                    .parse::<QpStatus>()
                    .map_err(|_| f.err(format!("unknown qp_status `{status}`")))?,
                qp_iterations: iters.parse().map_err(|_| f.err(format!("bad qp_iters `{iters}`")))?,
                t_model_s: t_model.unwrap_or(f64::NAN),
                t_solve_s: t_solve.unwrap_or(f64::NAN),
            })
        }
        (None, None, None) => None,
        _ => return Err(f.err("incomplete solve record")),
    };
    Ok(LogRow { t, x, u, y, solve })
}

pub fn read_log<R: Read>(input: R) -> Result<(Dims, Vec<LogRow>), CsvError> {
    let mut r = csv::ReaderBuilder::new().flexible(true).from_reader(input);
    let head = r.headers()?.clone();
    let dims = dims_from_header(&head).ok_or(CsvError::Format {
        line: 1,
        message: "unrecognized header".into(),
    })?;
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        rows.push(parse_row(&rec?, dims, i as u64 + 2)?);
    }
    Ok((dims, rows))
}

pub fn read_log_file(path: &std::path::Path) -> Result<(Dims, Vec<LogRow>), CsvError> {
    read_log(std::fs::File::open(path)?)
}
