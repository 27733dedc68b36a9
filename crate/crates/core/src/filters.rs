// SPDX-License-Identifier: Apache-2.0

//! Syscall filter construction, the constant-time filter table and a
//! sequential seccomp-style evaluator used as the performance baseline.
//!
//! ```
//! use dpti_core::filters::{create_filters, CmpOp, FilterRule};
//! use dpti_core::syscalls::{READ, WRITE};
//!
//! let mut filters = create_filters();
//! filters.add_rule(READ).unwrap();
//! filters.add_rule_string(WRITE, 1, CmpOp::Eq, b"teststring").unwrap();
//! filters.install().unwrap();
//! assert_eq!(filters.lookup(READ), &FilterRule::Allow);
//! assert!(matches!(filters.lookup(WRITE), FilterRule::AllowIf(_)));
//! ```

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::syscalls::SYSCALL_TABLE_SIZE;

/// Syscalls take at most six register arguments.
pub const MAX_ARGS: usize = 6;
/// Longest string accepted in a string filter (one page).
pub const MAX_ARG_STRING: usize = 4096;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl CmpOp {
    pub fn eval(self, lhs: u64, rhs: u64) -> bool {
        match self {
            CmpOp::Eq => lhs == rhs,
            CmpOp::Ne => lhs != rhs,
            CmpOp::Lt => lhs < rhs,
            CmpOp::Le => lhs <= rhs,
            CmpOp::Gt => lhs > rhs,
            CmpOp::Ge => lhs >= rhs,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArgCheck {
    /// Compared directly against the register value.
    Primitive { op: CmpOp, value: u64 },
    /// The argument is a pointer to a NUL-terminated string that must equal
    /// one of `allowed`.
    StringSet { allowed: Vec<Vec<u8>> },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArgFilter {
    pub arg_index: u8,
    pub check: ArgCheck,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterRule {
    #[default]
    Deny,
    Allow,
    AllowIf(Vec<ArgFilter>),
}

impl FilterRule {
    /// True when every primitive argument filter accepts the raw registers.
    pub fn primitives_pass(&self, args: &[u64; MAX_ARGS]) -> bool {
        match self {
            FilterRule::AllowIf(filters) => filters.iter().all(|f| match &f.check {
                ArgCheck::Primitive { op, value } => op.eval(args[f.arg_index as usize], *value),
                ArgCheck::StringSet { .. } => true,
            }),
            FilterRule::Allow => true,
            FilterRule::Deny => false,
        }
    }

    /// `(arg_index, allowed strings)` for every string filter, in argument order.
    pub fn string_filters(&self) -> Vec<(u8, &[Vec<u8>])> {
        match self {
            FilterRule::AllowIf(filters) => filters
                .iter()
                .filter_map(|f| match &f.check {
                    ArgCheck::StringSet { allowed } => Some((f.arg_index, allowed.as_slice())),
                    ArgCheck::Primitive { .. } => None,
                })
                .collect(),
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FilterError {
    #[error("filters already installed; the table is immutable")]
    AlreadyInstalled,
    #[error("syscall {nr} already has a filter on argument {arg_index}")]
    DuplicateArgFilter { nr: u32, arg_index: u8 },
    #[error("filter string of {len} bytes exceeds {MAX_ARG_STRING}")]
    StringTooLong { len: usize },
    #[error("filter string must not be empty or contain NUL")]
    BadString,
    #[error("argument index {0} out of range (syscalls take {MAX_ARGS} arguments)")]
    BadArgIndex(u8),
    #[error("syscall number {0} outside the filter table")]
    BadSyscall(u32),
    #[error("string filters only support EQ")]
    UnsupportedStringOp,
    #[error("syscall {0} has a string filter, which seccomp cannot express")]
    NotExpressible(u32),
}

/// Dense per-syscall rule array.
///
/// Built with the `add_rule*` calls, then frozen with [`install`]. After
/// installation every mutator returns [`FilterError::AlreadyInstalled`].
///
/// [`install`]: FilterTable::install
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterTable {
    rules: Vec<FilterRule>,
    installed: bool,
    refcount: u32,
    freed: bool,
}

/// Filters under construction. Same type as the installed table.
pub type FilterBuilder = FilterTable;

pub fn create_filters() -> FilterBuilder {
    FilterTable::default()
}

impl Default for FilterTable {
    fn default() -> Self {
        FilterTable {
            rules: vec![FilterRule::Deny; SYSCALL_TABLE_SIZE],
            installed: false,
            refcount: 0,
            freed: false,
        }
    }
}

static DENY: FilterRule = FilterRule::Deny;

impl FilterTable {
    fn slot(&mut self, nr: u32) -> Result<&mut FilterRule, FilterError> {
        if self.installed {
            return Err(FilterError::AlreadyInstalled);
        }
        self.rules.get_mut(nr as usize).ok_or(FilterError::BadSyscall(nr))
    }

    /// Allows `nr` unconditionally unless argument filters already exist.
    pub fn add_rule(&mut self, nr: u32) -> Result<(), FilterError> {
        let slot = self.slot(nr)?;
        if *slot == FilterRule::Deny {
            *slot = FilterRule::Allow;
        }
        Ok(())
    }

    pub fn add_rule_primitive(
        &mut self,
        nr: u32,
        arg_index: u8,
        op: CmpOp,
        value: u64,
    ) -> Result<(), FilterError> {
        if arg_index as usize >= MAX_ARGS {
            return Err(FilterError::BadArgIndex(arg_index));
        }
        let filters = Self::arg_filters(self.slot(nr)?);
        if filters.iter().any(|f| f.arg_index == arg_index) {
            return Err(FilterError::DuplicateArgFilter { nr, arg_index });
        }
        filters.push(ArgFilter { arg_index, check: ArgCheck::Primitive { op, value } });
        filters.sort_by_key(|f| f.arg_index);
        Ok(())
    }

    /// Adds `s` to the allowed set of the string filter on `arg_index`,
    /// creating the filter on first use.
    pub fn add_rule_string(
        &mut self,
        nr: u32,
        arg_index: u8,
        op: CmpOp,
        s: &[u8],
    ) -> Result<(), FilterError> {
        if arg_index as usize >= MAX_ARGS {
            return Err(FilterError::BadArgIndex(arg_index));
        }
        if op != CmpOp::Eq {
            return Err(FilterError::UnsupportedStringOp);
        }
        if s.len() > MAX_ARG_STRING {
            return Err(FilterError::StringTooLong { len: s.len() });
        }
        if s.is_empty() || s.contains(&0) {
            return Err(FilterError::BadString);
        }
        let filters = Self::arg_filters(self.slot(nr)?);
        match filters.iter_mut().find(|f| f.arg_index == arg_index) {
            Some(ArgFilter { check: ArgCheck::StringSet { allowed }, .. }) => {
                if !allowed.iter().any(|a| a == s) {
                    allowed.push(s.to_vec());
                }
            }
            Some(_) => return Err(FilterError::DuplicateArgFilter { nr, arg_index }),
            None => {
                filters.push(ArgFilter {
                    arg_index,
                    check: ArgCheck::StringSet { allowed: vec![s.to_vec()] },
                });
                filters.sort_by_key(|f| f.arg_index);
            }
        }
        Ok(())
    }

    fn arg_filters(slot: &mut FilterRule) -> &mut Vec<ArgFilter> {
        if !matches!(slot, FilterRule::AllowIf(_)) {
            *slot = FilterRule::AllowIf(Vec::new());
        }
        match slot {
            FilterRule::AllowIf(v) => v,
            _ => unreachable!(),
        }
    }

    /// Freezes the table and takes the first reference.
    pub fn install(&mut self) -> Result<(), FilterError> {
        if self.installed {
            return Err(FilterError::AlreadyInstalled);
        }
        self.installed = true;
        self.refcount = 1;
        Ok(())
    }

    pub fn is_installed(&self) -> bool {
        self.installed
    }

    /// Constant-time rule lookup; out-of-range numbers are denied.
    pub fn lookup(&self, nr: u32) -> &FilterRule {
        self.rules.get(nr as usize).unwrap_or(&DENY)
    }

    /// Number of syscalls with a non-deny rule.
    pub fn populated(&self) -> usize {
        self.rules.iter().filter(|r| **r != FilterRule::Deny).count()
    }

    /// Total filters in the sense of "rules plus allowed strings": each plain
    /// allow counts once, each allowed string counts once.
    pub fn filter_count(&self) -> usize {
        self.rules
            .iter()
            .map(|r| match r {
                FilterRule::Deny => 0,
                FilterRule::Allow => 1,
                FilterRule::AllowIf(fs) => fs
                    .iter()
                    .map(|f| match &f.check {
                        ArgCheck::Primitive { .. } => 1,
                        ArgCheck::StringSet { allowed } => allowed.len(),
                    })
                    .sum(),
            })
            .sum()
    }

    pub fn refcount(&self) -> u32 {
        self.refcount
    }

    pub fn is_freed(&self) -> bool {
        self.freed
    }

    pub fn retain(&mut self, n: u32) {
        debug_assert!(!self.freed, "retain after free");
        self.refcount += n;
    }

    /// Drops `n` references. Returns true when this call freed the table.
    pub fn release(&mut self, n: u32) -> bool {
        self.refcount = self.refcount.saturating_sub(n);
        if self.refcount == 0 && !self.freed {
            self.freed = true;
            return true;
        }
        false
    }

    pub fn rules(&self) -> impl Iterator<Item = (u32, &FilterRule)> {
        self.rules.iter().enumerate().map(|(i, r)| (i as u32, r))
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeccompAction {
    Allow,
    Deny,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeccompRule {
    pub nr: u32,
    pub args: Vec<(u8, CmpOp, u64)>,
    pub action: SeccompAction,
}

impl SeccompRule {
    pub fn new(nr: u32, action: SeccompAction) -> Self {
        SeccompRule { nr, args: Vec::new(), action }
    }

    fn matches(&self, nr: u32, args: &[u64; MAX_ARGS]) -> bool {
        self.nr == nr && self.args.iter().all(|&(i, op, v)| op.eval(args[i as usize], v))
    }
}

/// Sequential filter list, kept sorted by syscall number the way a filter
/// compiler emits it. Evaluation visits rules in order and stops at the
/// first rule for a larger number.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeccompProgram {
    rules: Vec<SeccompRule>,
    pub default_action: SeccompAction,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeccompVerdict {
    pub action: SeccompAction,
    pub scanned: u32,
}

impl SeccompProgram {
    pub fn new(mut rules: Vec<SeccompRule>, default_action: SeccompAction) -> Self {
        rules.sort_by_key(|r| r.nr);
        SeccompProgram { rules, default_action }
    }

    /// Translates a filter table. Unlisted syscalls fall to the default
    /// action; string filters are rejected.
    pub fn from_table(table: &FilterTable, explicit_denies: bool) -> Result<Self, FilterError> {
        let mut rules = Vec::new();
        for (nr, rule) in table.rules() {
            match rule {
                FilterRule::Deny if explicit_denies => {
                    rules.push(SeccompRule::new(nr, SeccompAction::Deny))
                }
                FilterRule::Deny => {}
                FilterRule::Allow => rules.push(SeccompRule::new(nr, SeccompAction::Allow)),
                FilterRule::AllowIf(filters) => {
                    let mut args = Vec::new();
                    for f in filters {
                        match &f.check {
                            ArgCheck::Primitive { op, value } => args.push((f.arg_index, *op, *value)),
                            ArgCheck::StringSet { .. } => return Err(FilterError::NotExpressible(nr)),
                        }
                    }
                    rules.push(SeccompRule { nr, args, action: SeccompAction::Allow });
                }
            }
        }
        Ok(SeccompProgram::new(rules, SeccompAction::Deny))
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    /// Least permissive action among the matching rules (default when none
    /// match) together with the number of rules visited.
    pub fn eval(&self, nr: u32, args: &[u64; MAX_ARGS]) -> SeccompVerdict {
        let mut scanned = 0;
        let mut decision: Option<SeccompAction> = None;
        for rule in &self.rules {
            if rule.nr > nr {
                break;
            }
            scanned += 1;
            if rule.matches(nr, args) {
                decision = Some(decision.map_or(rule.action, |d| d.max(rule.action)));
            }
        }
        SeccompVerdict { action: decision.unwrap_or(self.default_action), scanned }
    }
}

/// Decision of the filter table for raw register values, ignoring string
/// filters. Used for differential testing against [`SeccompProgram`].
pub fn table_decision(table: &FilterTable, nr: u32, args: &[u64; MAX_ARGS]) -> SeccompAction {
    if table.lookup(nr).primitives_pass(args) {
        SeccompAction::Allow
    } else {
        SeccompAction::Deny
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::syscalls::{GETPPID, OPENAT, READ, WRITE};

    #[test]
    fn listing_style_table() {
        let mut f = create_filters();
        f.add_rule(READ).unwrap();
        f.add_rule_string(WRITE, 1, CmpOp::Eq, b"teststring").unwrap();
        f.install().unwrap();
        assert_eq!(f.populated(), 2);
        assert_eq!(f.refcount(), 1);
        assert_eq!(f.lookup(GETPPID), &FilterRule::Deny);
        assert_eq!(f.lookup(READ), &FilterRule::Allow);
        assert!(matches!(f.lookup(WRITE), FilterRule::AllowIf(_)));
        assert_eq!(f.lookup(10_000), &FilterRule::Deny);
    }

    #[test]
    fn install_twice_and_mutation_after_install() {
        let mut f = create_filters();
        f.install().unwrap();
        assert_eq!(f.install(), Err(FilterError::AlreadyInstalled));
        assert_eq!(f.add_rule(READ), Err(FilterError::AlreadyInstalled));
        assert_eq!(
            f.add_rule_string(OPENAT, 1, CmpOp::Eq, b"x"),
            Err(FilterError::AlreadyInstalled)
        );
    }

    #[test]
    fn argument_bounds_and_duplicates() {
        let mut f = create_filters();
        assert_eq!(f.add_rule_string(WRITE, 6, CmpOp::Eq, b"x"), Err(FilterError::BadArgIndex(6)));
        f.add_rule_primitive(WRITE, 0, CmpOp::Eq, 1).unwrap();
        assert_eq!(
            f.add_rule_primitive(WRITE, 0, CmpOp::Eq, 2),
            Err(FilterError::DuplicateArgFilter { nr: WRITE, arg_index: 0 })
        );
        assert_eq!(
            f.add_rule_string(WRITE, 0, CmpOp::Eq, b"a"),
            Err(FilterError::DuplicateArgFilter { nr: WRITE, arg_index: 0 })
        );
        let long = vec![b'a'; MAX_ARG_STRING + 1];
        assert_eq!(
            f.add_rule_string(WRITE, 1, CmpOp::Eq, &long),
            Err(FilterError::StringTooLong { len: MAX_ARG_STRING + 1 })
        );
        assert_eq!(f.add_rule_string(WRITE, 1, CmpOp::Ne, b"a"), Err(FilterError::UnsupportedStringOp));
    }

    #[test]
    fn strings_accumulate() {
        let mut f = create_filters();
        f.add_rule_string(OPENAT, 1, CmpOp::Eq, b"a").unwrap();
        f.add_rule_string(OPENAT, 1, CmpOp::Eq, b"b").unwrap();
        f.add_rule_string(OPENAT, 1, CmpOp::Eq, b"a").unwrap();
        assert_eq!(f.filter_count(), 2);
        let strings = f.lookup(OPENAT).string_filters();
        assert_eq!(strings, vec![(1u8, &[b"a".to_vec(), b"b".to_vec()][..])]);
    }

    #[test]
    fn refcount_frees_once() {
        let mut f = create_filters();
        f.install().unwrap();
        f.retain(2);
        assert!(!f.release(2));
        assert!(f.release(1));
        assert!(f.is_freed());
        assert!(!f.release(1));
        assert_eq!(f.refcount(), 0);
    }

    #[test]
    fn seccomp_empty_program() {
        let p = SeccompProgram::new(vec![], SeccompAction::Deny);
        assert_eq!(p.eval(GETPPID, &[0; 6]), SeccompVerdict { action: SeccompAction::Deny, scanned: 0 });
    }

    #[test]
    fn seccomp_least_permissive_wins() {
        let p = SeccompProgram::new(
            vec![SeccompRule::new(GETPPID, SeccompAction::Allow), SeccompRule::new(GETPPID, SeccompAction::Deny)],
            SeccompAction::Allow,
        );
        assert_eq!(p.eval(GETPPID, &[0; 6]).action, SeccompAction::Deny);
    }

    #[test]
    fn seccomp_scan_grows_with_position() {
        // 341 denies and 8 allows over every table slot
        let allowed = [0u32, 1, 3, 5, 9, 60, GETPPID, 231];
        let rules: Vec<_> = (0..SYSCALL_TABLE_SIZE as u32)
            .map(|nr| {
                let action = if allowed.contains(&nr) { SeccompAction::Allow } else { SeccompAction::Deny };
                SeccompRule::new(nr, action)
            })
            .collect();
        assert_eq!(rules.iter().filter(|r| r.action == SeccompAction::Deny).count(), 341);
        let p = SeccompProgram::new(rules, SeccompAction::Deny);
        let v = p.eval(GETPPID, &[0; 6]);
        assert_eq!(v, SeccompVerdict { action: SeccompAction::Allow, scanned: GETPPID + 1 });
        assert!(p.eval(READ, &[0; 6]).scanned < v.scanned);
    }
}
