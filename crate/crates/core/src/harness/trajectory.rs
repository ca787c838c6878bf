//! Per-round traces and their CSV form.

use std::io::{Read, Write};

use crate::error::{CbusError, Result};
use crate::protocol::Feedback;

pub const CSV_COLUMNS: [&str; 13] = [
    "t",
    "context",
    "action",
    "reward",
    "xi",
    "z",
    "inst_reg_r",
    "inst_reg_c",
    "cum_reg_r",
    "cum_reg_c",
    "n_surviving",
    "active_mu",
    "lambda",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    /// 1-based round index.
    pub t: usize,
    pub context: usize,
    pub action: usize,
    pub reward: f64,
    pub xi: bool,
    pub z: bool,
    pub inst_reg_r: f64,
    pub inst_reg_c: f64,
    pub cum_reg_r: f64,
    pub cum_reg_c: f64,
    pub n_surviving: usize,
    /// Blend weight in charge this round, when there is one.
    pub active_mu: Option<f64>,
    /// Dual variable in force this round, when there is one.
    pub lambda: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub records: Vec<RoundRecord>,
}

impl Trajectory {
    pub fn with_capacity(n: usize) -> Self {
        Self { records: Vec::with_capacity(n) }
    }

    /// Appends a round, extending the cumulative regret columns.
    pub fn push_round(
        &mut self,
        feedback: &Feedback,
        regret: (f64, f64),
        n_surviving: usize,
        active_mu: Option<f64>,
        lambda: Option<f64>,
    ) {
        let (cum_r, cum_c) = self.records.last().map_or((0.0, 0.0), |r| (r.cum_reg_r, r.cum_reg_c));
        self.records.push(RoundRecord {
            t: self.records.len() + 1,
            context: feedback.context,
            action: feedback.action,
            reward: feedback.reward,
            xi: feedback.xi,
            z: feedback.z,
            inst_reg_r: regret.0,
            inst_reg_c: regret.1,
            cum_reg_r: cum_r + regret.0,
            cum_reg_c: cum_c + regret.1,
            n_surviving,
            active_mu,
            lambda,
        });
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn final_cum_reg_r(&self) -> f64 {
        self.records.last().map_or(0.0, |r| r.cum_reg_r)
    }

    pub fn final_cum_reg_c(&self) -> f64 {
        self.records.last().map_or(0.0, |r| r.cum_reg_c)
    }

    /// Rounds deliberately spent on the revealing action.
    pub fn total_z(&self) -> usize {
        self.records.iter().filter(|r| r.z).count()
    }

    /// Rounds on which the preferred action was observed, for any reason.
    pub fn total_queries(&self) -> usize {
        self.records.iter().filter(|r| r.xi).count()
    }

    pub fn actions(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.action).collect()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(CSV_COLUMNS)?;
        for r in &self.records {
            let opt = |v: Option<f64>| v.map(format_sig9).unwrap_or_default();
            w.write_record([
                r.t.to_string(),
                r.context.to_string(),
                r.action.to_string(),
                format_sig9(r.reward),
                u8::from(r.xi).to_string(),
                u8::from(r.z).to_string(),
                format_sig9(r.inst_reg_r),
                format_sig9(r.inst_reg_c),
                format_sig9(r.cum_reg_r),
                format_sig9(r.cum_reg_c),
                r.n_surviving.to_string(),
                opt(r.active_mu),
                opt(r.lambda),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        String::from_utf8(buf).map_err(|e| CbusError::Internal(e.to_string()))
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.iter().ne(CSV_COLUMNS.iter().copied()) {
            return Err(CbusError::config(format!("unexpected CSV header: {:?}", headers)));
        }
        let mut records = Vec::new();
        for row in rdr.records() {
            let row = row?;
            let f = |i: usize| -> Result<f64> {
                row[i].parse::<f64>().map_err(|e| CbusError::config(format!("column {}: {e}", CSV_COLUMNS[i])))
            };
            let u = |i: usize| -> Result<usize> {
                row[i].parse::<usize>().map_err(|e| CbusError::config(format!("column {}: {e}", CSV_COLUMNS[i])))
            };
            let opt = |i: usize| -> Result<Option<f64>> { if row[i].is_empty() { Ok(None) } else { f(i).map(Some) } };
            records.push(RoundRecord {
                t: u(0)?,
                context: u(1)?,
                action: u(2)?,
                reward: f(3)?,
                xi: u(4)? == 1,
                z: u(5)? == 1,
                inst_reg_r: f(6)?,
                inst_reg_c: f(7)?,
                cum_reg_r: f(8)?,
                cum_reg_c: f(9)?,
                n_surviving: u(10)?,
                active_mu: opt(11)?,
                lambda: opt(12)?,
            });
        }
        Ok(Self { records })
    }

    /// Value of a named numeric column in the last row.
    pub fn final_value(&self, column: &str) -> Result<f64> {
        let r = self.records.last().ok_or_else(|| CbusError::arg("empty trajectory"))?;
        let v = match column {
            "t" => r.t as f64,
            "reward" => r.reward,
            "inst_reg_r" => r.inst_reg_r,
            "inst_reg_c" => r.inst_reg_c,
            "cum_reg_r" => r.cum_reg_r,
            "cum_reg_c" => r.cum_reg_c,
            "n_surviving" => r.n_surviving as f64,
            "active_mu" => r.active_mu.unwrap_or(f64::NAN),
            "lambda" => r.lambda.unwrap_or(f64::NAN),
            other => return Err(CbusError::arg(format!("column `{other}` is not a numeric trace column"))),
        };
        Ok(v)
    }
}

/// Formats with 9 significant digits, plain notation for moderate exponents.
pub fn format_sig9(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific notation");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        trim_zeros(format!("{x:.decimals$}"))
    } else {
        format!("{}e{exp}", trim_zeros(mantissa.to_string()))
    }
}

fn trim_zeros(s: String) -> String {
    if !s.contains('.') {
        return s;
    }
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}
