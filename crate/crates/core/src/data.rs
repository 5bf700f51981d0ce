//! Season data: team coding, CSV ingestion, validation and covariate centering.
//!
//! Two CSV layouts are accepted. [`SchemaVariant::Table1`] carries the four
//! efficiency ratios per side directly (`ser_eff_h`, `att_eff_h`, ...), while
//! [`SchemaVariant::RawCounts`] carries `(tot, perfect, err)` triples per skill
//! and side (`ser_tot_h`, `ser_perfect_h`, `ser_err_h`, ...) from which the
//! ratios are computed. Both layouts may add `home_code`/`away_code` columns
//! holding explicit 1-based team codes.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of covariate streams: four efficiencies for each of home and away.
pub const N_COVARIATES: usize = 8;

/// Column names of the covariate streams, in the order used by
/// [`MatchRecord::covariates`] and [`SeasonData::covariate_means`].
pub const COVARIATE_NAMES: [&str; N_COVARIATES] = [
    "ser_eff_h",
    "att_eff_h",
    "def_eff_h",
    "blo_eff_h",
    "ser_eff_a",
    "att_eff_a",
    "def_eff_a",
    "blo_eff_a",
];

const SKILLS: [&str; 4] = ["ser", "att", "def", "blo"];

/// Zero-based team identifier. Files and reports use the 1-based code.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TeamId(pub usize);

impl TeamId {
    pub fn from_code(code: usize) -> Option<Self> {
        code.checked_sub(1).map(TeamId)
    }

    pub fn code(self) -> usize {
        self.0 + 1
    }
}

/// Bijection between team names and codes `1..=K`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TeamIndex {
    names: Vec<String>,
    lookup: HashMap<String, TeamId>,
}

impl TeamIndex {
    /// Builds an index where `names[k]` receives code `k + 1`.
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.len() < 2 {
            return Err(Error::TooFewTeams(names.len()));
        }
        let mut lookup = HashMap::with_capacity(names.len());
        for (k, name) in names.iter().enumerate() {
            if lookup.insert(name.clone(), TeamId(k)).is_some() {
                return Err(Error::UnknownTeam(format!("`{name}` listed twice")));
            }
        }
        Ok(TeamIndex { names, lookup })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, id: TeamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<TeamId> {
        self.lookup.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = TeamId> {
        (0..self.names.len()).map(TeamId)
    }
}

/// Per-side efficiency ratios, each `(perfect - errors) / total`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Efficiencies {
    pub serve: f64,
    pub attack: f64,
    pub defence: f64,
    pub block: f64,
}

impl Efficiencies {
    pub fn to_array(self) -> [f64; 4] {
        [self.serve, self.attack, self.defence, self.block]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Efficiencies {
            serve: a[0],
            attack: a[1],
            defence: a[2],
            block: a[3],
        }
    }
}

/// Raw tallies for one skill of one team in one match.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RawSkillCounts {
    pub total: u32,
    pub perfect: u32,
    pub errors: u32,
}

/// `(perfect - errors) / total`. A zero total is an error, never a silent 0.
pub fn compute_efficiency(counts: RawSkillCounts) -> Result<f64> {
    if counts.total == 0 {
        return Err(Error::UndefinedEfficiency);
    }
    Ok((f64::from(counts.perfect) - f64::from(counts.errors)) / f64::from(counts.total))
}

/// One played match. Indicators are kept as recorded (not coerced to
/// binary) so that corrupted source rows survive parsing and can be reported
/// by [`validate_season`].
#[derive(Clone, Debug, PartialEq)]
pub struct MatchRecord {
    pub match_id: u32,
    pub home: TeamId,
    pub away: TeamId,
    pub y_h: u32,
    pub y_a: u32,
    pub s_h: u32,
    pub s_a: u32,
    pub d_s: f64,
    pub d_m: f64,
    pub eff_home: Efficiencies,
    pub eff_away: Efficiencies,
}

impl MatchRecord {
    /// The 8 covariate values in [`COVARIATE_NAMES`] order.
    pub fn covariates(&self) -> [f64; N_COVARIATES] {
        let h = self.eff_home.to_array();
        let a = self.eff_away.to_array();
        [h[0], h[1], h[2], h[3], a[0], a[1], a[2], a[3]]
    }

    fn set_covariates(&mut self, c: [f64; N_COVARIATES]) {
        self.eff_home = Efficiencies::from_array([c[0], c[1], c[2], c[3]]);
        self.eff_away = Efficiencies::from_array([c[4], c[5], c[6], c[7]]);
    }

    /// `(d_s, d_m)` implied by the set counts, if they form a legal result.
    pub fn implied_indicators(&self) -> Option<(u8, u8)> {
        indicators_from_sets(self.s_h, self.s_a)
    }
}

/// True when exactly one side has three sets and the other 0..=2.
pub fn legal_sets(s_h: u32, s_a: u32) -> bool {
    (s_h == 3 && s_a <= 2) || (s_a == 3 && s_h <= 2)
}

/// `d_s = 1` iff five sets were played, `d_m = 1` iff the home side won.
pub fn indicators_from_sets(s_h: u32, s_a: u32) -> Option<(u8, u8)> {
    legal_sets(s_h, s_a).then(|| (u8::from(s_h + s_a == 5), u8::from(s_h > s_a)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeasonData {
    pub teams: TeamIndex,
    pub matches: Vec<MatchRecord>,
    /// Means removed by [`center_covariates`], accumulated across calls.
    pub covariate_means: [f64; N_COVARIATES],
}

impl SeasonData {
    pub fn n_teams(&self) -> usize {
        self.teams.len()
    }

    /// Mean of all observed points, home and away pooled.
    pub fn mean_points(&self) -> Option<f64> {
        if self.matches.is_empty() {
            return None;
        }
        let total: f64 = self
            .matches
            .iter()
            .map(|m| f64::from(m.y_h) + f64::from(m.y_a))
            .sum();
        Some(total / (2 * self.matches.len()) as f64)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemaVariant {
    /// Pre-computed efficiency ratios.
    #[default]
    Table1,
    /// `(tot, perfect, err)` triples per skill and side.
    RawCounts,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SchemaOptions {
    pub variant: SchemaVariant,
}

pub fn parse_season_csv(path: impl AsRef<Path>, opts: &SchemaOptions) -> Result<SeasonData> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_season_reader(file, &path.display().to_string(), opts)
}

struct Columns {
    idx: HashMap<String, usize>,
}

impl Columns {
    fn get(&self, name: &str) -> Result<usize> {
        self.idx
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    }
}

struct RowCtx<'a> {
    source: &'a str,
    line: u64,
    record: &'a csv::StringRecord,
}

impl RowCtx<'_> {
    fn err(&self, message: String) -> Error {
        Error::Parse {
            path: self.source.to_string(),
            line: self.line,
            message,
        }
    }

    fn text(&self, col: usize) -> &str {
        self.record.get(col).unwrap_or("").trim()
    }

    fn uint(&self, col: usize, name: &str) -> Result<u32> {
        let s = self.text(col);
        s.parse()
            .map_err(|_| self.err(format!("column `{name}`: expected a nonnegative integer, got `{s}`")))
    }

    fn real(&self, col: usize, name: &str) -> Result<f64> {
        let s = self.text(col);
        match s.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(self.err(format!("column `{name}`: expected a number, got `{s}`"))),
        }
    }
}

/// Parses a season from any reader; `source` names it in error messages.
pub fn parse_season_reader<R: Read>(
    reader: R,
    source: &str,
    opts: &SchemaOptions,
) -> Result<SeasonData> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let cols = Columns {
        idx: headers
            .iter()
            .enumerate()
            .map(|(i, h)| (h.trim().to_string(), i))
            .collect(),
    };

    let c_id = cols.get("match_id")?;
    let c_home = cols.get("home_team")?;
    let c_away = cols.get("away_team")?;
    let c_y = [cols.get("y_h")?, cols.get("y_a")?];
    let c_s = [cols.get("s_h")?, cols.get("s_a")?];
    let c_d = [cols.get("d_s")?, cols.get("d_m")?];
    let codes = match (cols.idx.get("home_code"), cols.idx.get("away_code")) {
        (Some(&h), Some(&a)) => Some((h, a)),
        (None, None) => None,
        (Some(_), None) => return Err(Error::MissingColumn("away_code".into())),
        (None, Some(_)) => return Err(Error::MissingColumn("home_code".into())),
    };

    // Per side (h, a), per skill: either one ratio column or a count triple.
    enum EffCols {
        Ratio(usize),
        Counts([usize; 3]),
    }
    let mut eff_cols: Vec<(String, EffCols)> = Vec::with_capacity(N_COVARIATES);
    for side in ["h", "a"] {
        for skill in SKILLS {
            let c = match opts.variant {
                SchemaVariant::Table1 => {
                    let name = format!("{skill}_eff_{side}");
                    let i = cols.get(&name)?;
                    (name, EffCols::Ratio(i))
                }
                SchemaVariant::RawCounts => {
                    let t = cols.get(&format!("{skill}_tot_{side}"))?;
                    let p = cols.get(&format!("{skill}_perfect_{side}"))?;
                    let e = cols.get(&format!("{skill}_err_{side}"))?;
                    (format!("{skill}_{side}"), EffCols::Counts([t, p, e]))
                }
            };
            eff_cols.push(c);
        }
    }

    struct Row {
        match_id: u32,
        home: String,
        away: String,
        codes: Option<(usize, usize)>,
        y: [u32; 2],
        s: [u32; 2],
        d: [f64; 2],
        cov: [f64; N_COVARIATES],
        line: u64,
    }

    let mut rows = Vec::new();
    let mut record = csv::StringRecord::new();
    loop {
        let line = rdr.position().line();
        if !rdr.read_record(&mut record)? {
            break;
        }
        let line = record.position().map_or(line, |p| p.line());
        let ctx = RowCtx {
            source,
            line,
            record: &record,
        };
        let match_id = ctx.uint(c_id, "match_id")?;
        let home = ctx.text(c_home).to_string();
        let away = ctx.text(c_away).to_string();
        if home.is_empty() || away.is_empty() {
            return Err(ctx.err("empty team name".into()));
        }
        let codes = match codes {
            Some((h, a)) => Some((
                ctx.uint(h, "home_code")? as usize,
                ctx.uint(a, "away_code")? as usize,
            )),
            None => None,
        };
        let y = [ctx.uint(c_y[0], "y_h")?, ctx.uint(c_y[1], "y_a")?];
        let s = [ctx.uint(c_s[0], "s_h")?, ctx.uint(c_s[1], "s_a")?];
        let d = [ctx.real(c_d[0], "d_s")?, ctx.real(c_d[1], "d_m")?];
        let mut cov = [0.0; N_COVARIATES];
        for (slot, (name, c)) in cov.iter_mut().zip(&eff_cols) {
            *slot = match *c {
                EffCols::Ratio(i) => ctx.real(i, name)?,
                EffCols::Counts([t, p, e]) => {
                    let counts = RawSkillCounts {
                        total: ctx.uint(t, name)?,
                        perfect: ctx.uint(p, name)?,
                        errors: ctx.uint(e, name)?,
                    };
                    compute_efficiency(counts).map_err(|e| ctx.err(format!("{name}: {e}")))?
                }
            };
        }
        rows.push(Row {
            match_id,
            home,
            away,
            codes,
            y,
            s,
            d,
            cov,
            line,
        });
    }

    if rows.is_empty() {
        return Err(Error::NoMatches);
    }

    let mut seen = HashSet::new();
    for r in &rows {
        if !seen.insert(r.match_id) {
            return Err(Error::DuplicateMatchId(r.match_id));
        }
    }

    let teams = if codes.is_some() {
        let mut by_code: BTreeMap<usize, String> = BTreeMap::new();
        let mut by_name: HashMap<String, usize> = HashMap::new();
        for r in &rows {
            let (hc, ac) = r.codes.expect("code columns present");
            for (name, code) in [(&r.home, hc), (&r.away, ac)] {
                if let Some(prev) = by_name.insert(name.clone(), code) {
                    if prev != code {
                        return Err(Error::UnknownTeam(format!(
                            "line {}: `{name}` has codes {prev} and {code}",
                            r.line
                        )));
                    }
                }
                if let Some(prev) = by_code.insert(code, name.clone()) {
                    if &prev != name {
                        return Err(Error::UnknownTeam(format!(
                            "line {}: code {code} used for both `{prev}` and `{name}`",
                            r.line
                        )));
                    }
                }
            }
        }
        let k = by_code.len();
        if let Some((&code, name)) = by_code.iter().find(|(&c, _)| c == 0 || c > k) {
            return Err(Error::UnknownTeam(format!(
                "code {code} for `{name}` is outside 1..={k}"
            )));
        }
        TeamIndex::new(by_code.into_values().collect())?
    } else {
        let mut names: Vec<String> = Vec::new();
        let mut seen = HashSet::new();
        for r in &rows {
            for n in [&r.home, &r.away] {
                if seen.insert(n.clone()) {
                    names.push(n.clone());
                }
            }
        }
        TeamIndex::new(names)?
    };

    let mut matches: Vec<MatchRecord> = rows
        .into_iter()
        .map(|r| {
            let mut m = MatchRecord {
                match_id: r.match_id,
                home: teams.id(&r.home).expect("indexed"),
                away: teams.id(&r.away).expect("indexed"),
                y_h: r.y[0],
                y_a: r.y[1],
                s_h: r.s[0],
                s_a: r.s[1],
                d_s: r.d[0],
                d_m: r.d[1],
                eff_home: Efficiencies::default(),
                eff_away: Efficiencies::default(),
            };
            m.set_covariates(r.cov);
            m
        })
        .collect();
    matches.sort_by_key(|m| m.match_id);

    Ok(SeasonData {
        teams,
        matches,
        covariate_means: [0.0; N_COVARIATES],
    })
}

/// Writes the season in the ratio layout with explicit team codes.
pub fn write_season_csv<W: Write>(data: &SeasonData, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec![
        "match_id",
        "home_team",
        "away_team",
        "home_code",
        "away_code",
        "y_h",
        "y_a",
        "s_h",
        "s_a",
        "d_s",
        "d_m",
    ];
    header.extend(COVARIATE_NAMES);
    w.write_record(&header)?;
    for m in &data.matches {
        let mut rec = vec![
            m.match_id.to_string(),
            data.teams.name(m.home).to_string(),
            data.teams.name(m.away).to_string(),
            m.home.code().to_string(),
            m.away.code().to_string(),
            m.y_h.to_string(),
            m.y_a.to_string(),
            m.s_h.to_string(),
            m.s_a.to_string(),
            m.d_s.to_string(),
            m.d_m.to_string(),
        ];
        rec.extend(m.covariates().iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<writer>", e))?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    IllegalSets { s_h: u32, s_a: u32 },
    SameTeam,
    FiveSetIndicator { found: f64, expected: Option<u8> },
    WinnerIndicator { found: f64, expected: Option<u8> },
    EfficiencyRange { column: &'static str, value: f64 },
    /// A non-binary indicator next to a covariate holding exactly the
    /// indicator value the set counts imply.
    ColumnTransposition { indicator: &'static str, column: &'static str },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn expect(e: &Option<u8>) -> String {
            e.map_or_else(|| "unknown".to_string(), |v| v.to_string())
        }
        match self {
            Violation::IllegalSets { s_h, s_a } => write!(f, "illegal set counts {s_h}-{s_a}"),
            Violation::SameTeam => write!(f, "home and away team are the same"),
            Violation::FiveSetIndicator { found, expected } => {
                write!(f, "d_s inconsistent (found {found}); expected {}", expect(expected))
            }
            Violation::WinnerIndicator { found, expected } => {
                write!(f, "d_m inconsistent (found {found}); expected {}", expect(expected))
            }
            Violation::EfficiencyRange { column, value } => {
                write!(f, "{column} = {value} outside [-1, 1]")
            }
            Violation::ColumnTransposition { indicator, column } => {
                write!(f, "malformed row: {indicator} and {column} appear transposed")
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RowReport {
    pub match_id: u32,
    pub violations: Vec<Violation>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub rows: Vec<RowReport>,
    /// Season-level problems (match numbering).
    pub season: Vec<String>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.rows.is_empty() && self.season.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_clean() {
            return writeln!(f, "clean: no violations");
        }
        for s in &self.season {
            writeln!(f, "season: {s}")?;
        }
        for r in &self.rows {
            for v in &r.violations {
                writeln!(f, "match {}: {v}", r.match_id)?;
            }
        }
        Ok(())
    }
}

fn is_binary(v: f64) -> bool {
    v == 0.0 || v == 1.0
}

/// Reports every violated row invariant. Never fails; callers decide
/// whether to repair via [`repair_indicators`].
pub fn validate_season(data: &SeasonData) -> ValidationReport {
    let mut report = ValidationReport::default();

    for (expected, m) in (1u32..).zip(&data.matches) {
        if m.match_id != expected {
            report.season.push(format!(
                "match ids are not contiguous from 1: found {} at position {expected}",
                m.match_id
            ));
            break;
        }
    }

    for m in &data.matches {
        let mut v = Vec::new();
        if m.home == m.away {
            v.push(Violation::SameTeam);
        }
        let implied = m.implied_indicators();
        if implied.is_none() {
            v.push(Violation::IllegalSets {
                s_h: m.s_h,
                s_a: m.s_a,
            });
        }
        let exp_s = implied.map(|(s, _)| s);
        let exp_m = implied.map(|(_, w)| w);
        if !is_binary(m.d_s) || exp_s.is_some_and(|e| f64::from(e) != m.d_s) {
            v.push(Violation::FiveSetIndicator {
                found: m.d_s,
                expected: exp_s,
            });
        }
        if !is_binary(m.d_m) || exp_m.is_some_and(|e| f64::from(e) != m.d_m) {
            v.push(Violation::WinnerIndicator {
                found: m.d_m,
                expected: exp_m,
            });
        }
        let cov = m.covariates();
        for (name, &val) in COVARIATE_NAMES.iter().zip(&cov) {
            if !(-1.0..=1.0).contains(&val) {
                v.push(Violation::EfficiencyRange {
                    column: name,
                    value: val,
                });
            }
        }
        // Shuffled columns: a non-binary indicator whose expected value sits
        // verbatim in a neighbouring covariate column.
        for (indicator, found, exp) in [("d_s", m.d_s, exp_s), ("d_m", m.d_m, exp_m)] {
            if let (false, Some(e)) = (is_binary(found), exp) {
                if let Some(col) = COVARIATE_NAMES
                    .iter()
                    .zip(&cov)
                    .find(|(_, &c)| c == f64::from(e))
                    .map(|(n, _)| *n)
                {
                    v.push(Violation::ColumnTransposition {
                        indicator,
                        column: col,
                    });
                }
            }
        }
        if !v.is_empty() {
            report.rows.push(RowReport {
                match_id: m.match_id,
                violations: v,
            });
        }
    }
    report
}

/// Recomputes `d_s` and `d_m` from the set counts wherever those are legal.
pub fn repair_indicators(data: &SeasonData) -> SeasonData {
    let mut out = data.clone();
    for m in &mut out.matches {
        if let Some((s, w)) = m.implied_indicators() {
            m.d_s = f64::from(s);
            m.d_m = f64::from(w);
        }
    }
    out
}

/// Subtracts each covariate stream's mean over all matches. The removed
/// means are added to `covariate_means`, so repeated calls keep the
/// original-scale means.
pub fn center_covariates(data: &SeasonData) -> SeasonData {
    let mut out = data.clone();
    let n = out.matches.len();
    if n == 0 {
        return out;
    }
    let mut means = [0.0; N_COVARIATES];
    for m in &out.matches {
        for (acc, v) in means.iter_mut().zip(m.covariates()) {
            *acc += v;
        }
    }
    for acc in &mut means {
        *acc /= n as f64;
    }
    for m in &mut out.matches {
        let mut c = m.covariates();
        for (v, mean) in c.iter_mut().zip(&means) {
            *v -= mean;
        }
        m.set_covariates(c);
    }
    for (total, mean) in out.covariate_means.iter_mut().zip(&means) {
        *total += mean;
    }
    out
}
