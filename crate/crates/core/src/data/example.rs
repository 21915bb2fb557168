use serde::{Deserialize, Serialize};

use super::labels::VECTOR_CATEGORY;
use crate::error::{Error, Result};

/// One text with its hierarchical labels. Category and vector are class
/// indices into the Task B and Task C label sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub id: String,
    pub text: String,
    pub sexist: bool,
    pub category: Option<usize>,
    pub vector: Option<usize>,
}

impl LabeledExample {
    /// Builds an example, enforcing the label hierarchy.
    pub fn new(
        id: impl Into<String>,
        text: impl Into<String>,
        sexist: bool,
        category: Option<usize>,
        vector: Option<usize>,
    ) -> Result<Self> {
        let ex = LabeledExample {
            id: id.into(),
            text: text.into(),
            sexist,
            category,
            vector,
        };
        ex.validate()?;
        Ok(ex)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |message: &str| {
            Err(Error::Validation {
                row: self.id.clone(),
                message: message.to_string(),
            })
        };
        if self.text.trim().is_empty() {
            return fail("text is empty");
        }
        match (self.sexist, self.category, self.vector) {
            (false, None, None) => Ok(()),
            (false, _, _) => fail("not sexist text must have category and vector `none`"),
            (true, Some(c), Some(v)) => {
                if c >= 4 {
                    return fail("category index out of range");
                }
                if v >= VECTOR_CATEGORY.len() {
                    return fail("vector index out of range");
                }
                if VECTOR_CATEGORY[v] != c {
                    return fail("vector does not belong to category");
                }
                Ok(())
            }
            (true, _, _) => fail("sexist text needs both a category and a vector"),
        }
    }

    /// Task A class index.
    pub fn label_a(&self) -> usize {
        usize::from(self.sexist)
    }
}
