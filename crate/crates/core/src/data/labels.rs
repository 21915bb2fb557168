//! The three-level label taxonomy and its fixed index assignment.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Task A is binary, B is the 4-way category, C the 11-way fine-grained vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    A,
    B,
    C,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::A, Task::B, Task::C];

    pub fn labels(self) -> &'static [&'static str] {
        match self {
            Task::A => &TASK_A,
            Task::B => &TASK_B,
            Task::C => &TASK_C,
        }
    }

    pub fn num_classes(self) -> usize {
        self.labels().len()
    }

    pub fn label_set(self) -> TaskLabelSet {
        TaskLabelSet { task: self }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Task::A => "A",
            Task::B => "B",
            Task::C => "C",
        };
        f.write_str(s)
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "A" | "a" => Ok(Task::A),
            "B" | "b" => Ok(Task::B),
            "C" | "c" => Ok(Task::C),
            other => Err(format!("unknown task `{other}` (expected A, B or C)")),
        }
    }
}

pub const NOT_SEXIST: &str = "not sexist";
pub const SEXIST: &str = "sexist";

const TASK_A: [&str; 2] = [NOT_SEXIST, SEXIST];

const TASK_B: [&str; 4] = [
    "Threats plan to harm, and incitement",
    "Derogation",
    "Animosity",
    "Prejudiced discussions",
];

const TASK_C: [&str; 11] = [
    "Threats of harm",
    "Incitement and encouragement of harm",
    "Descriptive attacks",
    "Aggressive and emotive attacks",
    "Dehumanising attacks & overt sexual objectification",
    "Casual use of gendered slurs, profanities, and insults",
    "Immutable gender differences and gender stereotypes",
    "Backhanded gendered compliments",
    "Condescending explanations or unwelcome advice",
    "Supporting mistreatment of individual women",
    "Supporting systemic discrimination against women as a group",
];

/// Category (Task B index) of each fine-grained vector (Task C index).
pub const VECTOR_CATEGORY: [usize; 11] = [0, 0, 1, 1, 1, 2, 2, 2, 2, 3, 3];

/// Official dataset codes: "2." for categories, "2.1" for vectors.
const VECTOR_CODES: [&str; 11] = [
    "1.1", "1.2", "2.1", "2.2", "2.3", "3.1", "3.2", "3.3", "3.4", "4.1", "4.2",
];

/// Spellings used by the released dataset where they differ from the canonical form.
const CATEGORY_ALIASES: [(&str, usize); 1] = [("threats, plans to harm and incitement", 0)];

/// Ordered class names of one task with a bijective index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskLabelSet {
    pub task: Task,
}

impl TaskLabelSet {
    pub fn labels(&self) -> &'static [&'static str] {
        self.task.labels()
    }

    pub fn len(&self) -> usize {
        self.labels().len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn name(&self, index: usize) -> Option<&'static str> {
        self.labels().get(index).copied()
    }

    /// Index of a label string. Matching is case-insensitive, ignores
    /// punctuation and spacing, and accepts the dataset's numeric prefixes
    /// ("2. derogation", "2.1 descriptive attacks").
    pub fn index(&self, label: &str) -> Option<usize> {
        parse_label(self.task, label)
    }
}

fn normalise(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_alphanumeric() {
                c.to_ascii_lowercase()
            } else {
                ' '
            }
        })
        .collect::<String>()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

/// Splits a leading code such as "2." or "3.4" off a label.
fn split_code(s: &str) -> (Option<&str>, &str) {
    let trimmed = s.trim();
    let end = trimmed
        .find(|c: char| !(c.is_ascii_digit() || c == '.'))
        .unwrap_or(trimmed.len());
    let code = trimmed[..end].trim_end_matches('.');
    if code.is_empty() || !code.starts_with(|c: char| c.is_ascii_digit()) {
        (None, trimmed)
    } else {
        (Some(code), trimmed[end..].trim())
    }
}

fn parse_label(task: Task, raw: &str) -> Option<usize> {
    let (code, rest) = match task {
        Task::A => (None, raw.trim()),
        _ => split_code(raw),
    };
    let by_code = code.and_then(|c| match task {
        Task::B => c
            .parse::<usize>()
            .ok()
            .filter(|&i| (1..=4).contains(&i))
            .map(|i| i - 1),
        Task::C => VECTOR_CODES.iter().position(|&v| v == c),
        Task::A => None,
    });
    if code.is_some() && by_code.is_none() {
        return None;
    }
    let wanted = normalise(rest);
    let by_name = if wanted.is_empty() {
        None
    } else {
        task.labels()
            .iter()
            .position(|l| normalise(l) == wanted)
            .or_else(|| match task {
                Task::B => CATEGORY_ALIASES
                    .iter()
                    .find(|(a, _)| normalise(a) == wanted)
                    .map(|&(_, i)| i),
                _ => None,
            })
    };
    match (by_code, by_name) {
        (Some(c), Some(n)) if c == n => Some(c),
        (Some(_), Some(_)) => None,
        (Some(c), None) if wanted.is_empty() => Some(c),
        (Some(_), None) => None,
        (None, n) => n,
    }
}

/// True for the "none" placeholder used when a lower level does not apply.
pub fn is_none_label(s: &str) -> bool {
    let t = s.trim();
    t.is_empty() || t.eq_ignore_ascii_case("none")
}
