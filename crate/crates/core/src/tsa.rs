//! Teacher-student assignment strategies.
//!
//! A strategy is a `+`-separated list of segments, each covering the next
//! consecutive group of students:
//!
//! * `A<k>([a,b],p)`: each of `k` students gets between `a` and `b` distinct
//!   previous teachers, plus the current teacher with probability `p`.
//! * `B<k>`: each of `k` students gets between 1 and `k` distinct teachers
//!   drawn from the pooled current and previous teachers.
//! * `C<k>,<s>`: the first `s` students get between 1 and 5 pooled teachers,
//!   the remaining `k - s` get only the current teacher.
//!
//! Sampling produces a binary [`TsaMatrix`] with one row per teacher (row 0
//! is the current teacher) and one column per student.

use std::fmt;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RkdError};
use crate::seed::SeedRng;

/// Teacher-count cap for the first group of a `C` segment.
pub const C_GROUP_MAX_TEACHERS: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub enum Segment {
    A {
        students: usize,
        min_prev: usize,
        max_prev: usize,
        p_current: f64,
    },
    B {
        students: usize,
    },
    C {
        students: usize,
        split: usize,
    },
}

impl Segment {
    pub fn students(&self) -> usize {
        match *self {
            Segment::A { students, .. } | Segment::B { students } | Segment::C { students, .. } => {
                students
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(RkdError::StrategyConstraint(m));
        if self.students() == 0 {
            return fail(format!("{self}: segment must cover at least one student"));
        }
        match *self {
            Segment::A {
                min_prev,
                max_prev,
                p_current,
                ..
            } => {
                if min_prev > max_prev {
                    return fail(format!(
                        "{self}: range start {min_prev} exceeds end {max_prev}"
                    ));
                }
                if !(0.0..=1.0).contains(&p_current) {
                    return fail(format!("{self}: probability {p_current} outside [0, 1]"));
                }
                if max_prev == 0 && p_current == 0.0 {
                    return fail(format!("{self}: never assigns any teacher"));
                }
                Ok(())
            }
            Segment::B { .. } => Ok(()),
            Segment::C { students, split } => {
                if split >= students {
                    return fail(format!("{self}: split {split} must be below {students}"));
                }
                Ok(())
            }
        }
    }
}

impl fmt::Display for Segment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Segment::A {
                students,
                min_prev,
                max_prev,
                p_current,
            } => write!(f, "A{students}([{min_prev},{max_prev}],{p_current:?})"),
            Segment::B { students } => write!(f, "B{students}"),
            Segment::C { students, split } => write!(f, "C{students},{split}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Strategy {
    segments: Vec<Segment>,
}

impl Strategy {
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        if segments.is_empty() {
            return Err(RkdError::StrategyConstraint(
                "strategy has no segments".into(),
            ));
        }
        segments.iter().try_for_each(Segment::validate)?;
        Ok(Strategy { segments })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn num_students(&self) -> usize {
        self.segments.iter().map(Segment::students).sum()
    }

    pub fn check_students(&self, k: usize) -> Result<()> {
        if self.num_students() != k {
            return Err(RkdError::StrategyConstraint(format!(
                "{self} covers {} students, ensemble size is {k}",
                self.num_students()
            )));
        }
        Ok(())
    }

    /// Parses the grammar `segment ('+' segment)*` without a size check.
    pub fn parse(text: &str) -> Result<Self> {
        Parser::new(text).strategy()
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, s) in self.segments.iter().enumerate() {
            if i > 0 {
                f.write_str("+")?;
            }
            write!(f, "{s}")?;
        }
        Ok(())
    }
}

impl std::str::FromStr for Strategy {
    type Err = RkdError;
    fn from_str(s: &str) -> Result<Self> {
        Strategy::parse(s)
    }
}

impl Serialize for Strategy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Strategy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        Strategy::parse(&text).map_err(serde::de::Error::custom)
    }
}

/// Parses a strategy and checks it covers exactly `k` students.
pub fn parse_strategy(text: &str, k: usize) -> Result<Strategy> {
    let s = Strategy::parse(text)?;
    s.check_students(k)?;
    Ok(s)
}

const BUILTINS: [&str; 14] = [
    "A4([1,1],1.0)",
    "A4([2,2],0.5)",
    "A4([2,2],1.0)",
    "A4([3,3],1.0)",
    "A4([1,2],1.0)",
    "A4([0,2],1.0)",
    "B4",
    "A4([0,4],1.0)",
    "B2+A2([0,0],1.0)",
    "B2+A2([2,2],1.0)",
    "B2+A1([1,1],1.0)+A1([1,1],1.0)",
    "B2+A2([1,1],1.0)",
    "C4,2",
    "A4([0,0],1.0)",
];

/// Number of the built-in strategy that uses only the current teacher.
pub const BASELINE_STRATEGY: usize = 14;

/// Built-in strategy `#n`, `1 <= n <= 14`.
pub fn builtin_strategy(n: usize) -> Result<Strategy> {
    match n.checked_sub(1).and_then(|i| BUILTINS.get(i)) {
        Some(text) => Strategy::parse(text),
        None => Err(RkdError::invalid(format!(
            "built-in strategies are numbered 1..=14, got {n}"
        ))),
    }
}

pub fn builtin_strategies() -> Vec<(usize, Strategy)> {
    (1..=BUILTINS.len())
        .map(|n| (n, builtin_strategy(n).expect("built-ins parse")))
        .collect()
}

struct Parser<'a> {
    text: &'a str,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn new(text: &'a str) -> Self {
        Parser { text, pos: 0 }
    }

    fn error<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(RkdError::StrategySyntax {
            position: self.pos,
            message: message.into(),
        })
    }

    fn skip_ws(&mut self) {
        while self.peek().is_some_and(char::is_whitespace) {
            self.pos += 1;
        }
    }

    fn peek(&self) -> Option<char> {
        self.text[self.pos..].chars().next()
    }

    fn eat(&mut self, c: char) -> bool {
        self.skip_ws();
        if self.peek() == Some(c) {
            self.pos += c.len_utf8();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: char) -> Result<()> {
        if self.eat(c) {
            Ok(())
        } else {
            self.error(format!("expected `{c}`"))
        }
    }

    fn take_while(&mut self, f: impl Fn(char) -> bool) -> &'a str {
        self.skip_ws();
        let start = self.pos;
        while self.peek().is_some_and(&f) {
            self.pos += 1;
        }
        &self.text[start..self.pos]
    }

    fn integer(&mut self) -> Result<usize> {
        let start = self.pos;
        let digits = self.take_while(|c| c.is_ascii_digit());
        if digits.is_empty() {
            return self.error("expected an integer");
        }
        digits.parse().map_err(|_| RkdError::StrategySyntax {
            position: start,
            message: format!("integer `{digits}` out of range"),
        })
    }

    fn number(&mut self) -> Result<f64> {
        self.skip_ws();
        let start = self.pos;
        let lit =
            self.take_while(|c| c.is_ascii_digit() || matches!(c, '.' | 'e' | 'E' | '-' | '+'));
        match lit.parse::<f64>() {
            Ok(v) if !lit.is_empty() => Ok(v),
            _ => Err(RkdError::StrategySyntax {
                position: start,
                message: format!("expected a probability, found `{lit}`"),
            }),
        }
    }

    fn segment(&mut self) -> Result<Segment> {
        self.skip_ws();
        let start = self.pos;
        let kind = self.peek();
        if kind.is_some() {
            self.pos += 1;
        }
        let segment = match kind {
            Some('A') => {
                let students = self.integer()?;
                self.expect('(')?;
                self.expect('[')?;
                let min_prev = self.integer()?;
                self.expect(',')?;
                let max_prev = self.integer()?;
                self.expect(']')?;
                self.expect(',')?;
                let p_current = self.number()?;
                self.expect(')')?;
                Segment::A {
                    students,
                    min_prev,
                    max_prev,
                    p_current,
                }
            }
            Some('B') => Segment::B {
                students: self.integer()?,
            },
            Some('C') => {
                let students = self.integer()?;
                self.expect(',')?;
                let split = self.integer()?;
                Segment::C { students, split }
            }
            _ => {
                self.pos = start;
                return self.error("expected a segment starting with `A`, `B` or `C`");
            }
        };
        Ok(segment)
    }

    fn strategy(&mut self) -> Result<Strategy> {
        let mut segments = vec![self.segment()?];
        while self.eat('+') {
            segments.push(self.segment()?);
        }
        self.skip_ws();
        if self.pos != self.text.len() {
            return self.error("unexpected trailing input");
        }
        Strategy::new(segments)
    }
}

/// Binary assignment matrix: `rows = 1 + previous teachers`, `cols = students`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TsaMatrix {
    rows: usize,
    cols: usize,
    cells: Vec<bool>,
}

impl TsaMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        TsaMatrix {
            rows,
            cols,
            cells: vec![false; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, teacher: usize, student: usize) -> bool {
        self.cells[teacher * self.cols + student]
    }

    pub fn set(&mut self, teacher: usize, student: usize, on: bool) {
        self.cells[teacher * self.cols + student] = on;
    }

    /// Teacher rows assigned to `student`, ascending (row 0 first when set).
    pub fn teachers_of(&self, student: usize) -> Vec<usize> {
        (0..self.rows).filter(|&i| self.get(i, student)).collect()
    }

    pub fn previous_count(&self, student: usize) -> usize {
        (1..self.rows).filter(|&i| self.get(i, student)).count()
    }
}

impl fmt::Display for TsaMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..self.rows {
            let row: String = (0..self.cols)
                .map(|j| if self.get(i, j) { '1' } else { '0' })
                .collect();
            writeln!(f, "{row}")?;
        }
        Ok(())
    }
}

fn pick(rng: &mut SeedRng, lo: usize, hi: usize) -> usize {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Column of pooled teachers: `count` in `[1, cap]` distinct rows out of `0..=s`.
fn pooled_column(rng: &mut SeedRng, s: usize, cap: usize) -> Vec<usize> {
    let hi = cap.min(s + 1).max(1);
    let m = pick(rng, 1, hi);
    index::sample(rng, s + 1, m).into_vec()
}

/// Samples an assignment for `num_prev` previous teachers. Ranges clamp to
/// the teachers available; a column that comes out empty is redrawn, and a
/// segment that cannot reach any teacher at this size falls back to the
/// current teacher.
pub fn sample_tsa(strategy: &Strategy, num_prev: usize, rng: &mut SeedRng) -> TsaMatrix {
    let s = num_prev;
    let mut m = TsaMatrix::zeros(s + 1, strategy.num_students());
    let mut col = 0;
    for seg in strategy.segments() {
        for j in 0..seg.students() {
            let rows: Vec<usize> = match *seg {
                Segment::A {
                    min_prev,
                    max_prev,
                    p_current,
                    ..
                } => {
                    let (lo, hi) = (min_prev.min(s), max_prev.min(s));
                    if hi == 0 && p_current == 0.0 {
                        vec![0]
                    } else {
                        loop {
                            let n = pick(rng, lo, hi);
                            let mut rows: Vec<usize> = index::sample(rng, s, n)
                                .into_iter()
                                .map(|i| i + 1)
                                .collect();
                            if rng.random_bool(p_current) {
                                rows.push(0);
                            }
                            if !rows.is_empty() {
                                break rows;
                            }
                        }
                    }
                }
                Segment::B { students } => pooled_column(rng, s, students),
                Segment::C { split, .. } => {
                    if j < split {
                        pooled_column(rng, s, C_GROUP_MAX_TEACHERS)
                    } else {
                        vec![0]
                    }
                }
            };
            for r in rows {
                m.set(r, col, true);
            }
            col += 1;
        }
    }
    m
}
