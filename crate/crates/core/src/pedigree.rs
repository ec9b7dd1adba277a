//! Family records, kinship matrices and kinship-class bookkeeping.
//!
//! Members are always stored in canonical role order
//! (`Parent1, Parent2, Child1, Child2`) so that covariance blocks line up
//! across families. Absent members may still be listed (with
//! `present == false`) to carry covariates; they never contribute moments.

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelSpec, PhenotypeKind};

/// Maximum number of members in a nuclear family record.
pub const MAX_MEMBERS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MemberRole {
    Parent1,
    Parent2,
    Child1,
    Child2,
}

impl MemberRole {
    pub const ALL: [MemberRole; 4] = [
        MemberRole::Parent1,
        MemberRole::Parent2,
        MemberRole::Child1,
        MemberRole::Child2,
    ];

    /// Canonical slot index in `0..4`.
    pub fn slot(self) -> usize {
        match self {
            MemberRole::Parent1 => 0,
            MemberRole::Parent2 => 1,
            MemberRole::Child1 => 2,
            MemberRole::Child2 => 3,
        }
    }

    pub fn is_parent(self) -> bool {
        matches!(self, MemberRole::Parent1 | MemberRole::Parent2)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MemberRole::Parent1 => "Parent1",
            MemberRole::Parent2 => "Parent2",
            MemberRole::Child1 => "Child1",
            MemberRole::Child2 => "Child2",
        }
    }
}

impl fmt::Display for MemberRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MemberRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "parent1" | "p1" => Ok(MemberRole::Parent1),
            "parent2" | "p2" => Ok(MemberRole::Parent2),
            "child1" | "c1" => Ok(MemberRole::Child1),
            "child2" | "c2" => Ok(MemberRole::Child2),
            other => Err(Error::InvalidPedigree(format!("unknown role `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Member {
    pub role: MemberRole,
    /// Covariates per phenotype (without the intercept).
    pub covariates: Vec<Vec<f64>>,
    /// Phenotype values per phenotype; `None` when unobserved.
    pub phenotypes: Vec<Option<f64>>,
    pub present: bool,
}

impl Member {
    /// The observed value of phenotype `k`, if the member is present and
    /// the value was recorded.
    pub fn observed(&self, k: usize) -> Option<f64> {
        if self.present {
            self.phenotypes.get(k).copied().flatten()
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyRecord {
    pub family_id: String,
    pub members: Vec<Member>,
    pub weight: f64,
}

impl FamilyRecord {
    /// Validates and canonicalises a family. Members are sorted by role.
    pub fn new(family_id: impl Into<String>, mut members: Vec<Member>, weight: f64) -> Result<Self> {
        let family_id = family_id.into();
        if !(weight > 0.0 && weight.is_finite()) {
            return Err(Error::InvalidPedigree(format!(
                "family {family_id}: weight must be positive, got {weight}"
            )));
        }
        if members.len() > MAX_MEMBERS {
            return Err(Error::InvalidPedigree(format!(
                "family {family_id}: {} members listed, at most {MAX_MEMBERS} allowed",
                members.len()
            )));
        }
        members.sort_by_key(|m| m.role);
        for w in members.windows(2) {
            if w[0].role == w[1].role {
                return Err(Error::InvalidPedigree(format!(
                    "family {family_id}: duplicate role {}",
                    w[0].role
                )));
            }
        }
        let present = members.iter().filter(|m| m.present).count();
        if present == 0 {
            return Err(Error::InvalidPedigree(format!(
                "family {family_id}: no present members"
            )));
        }
        Ok(FamilyRecord {
            family_id,
            members,
            weight,
        })
    }

    /// The present member in canonical slot `slot`, if any.
    pub fn member_at(&self, slot: usize) -> Option<&Member> {
        self.members.iter().find(|m| m.role.slot() == slot && m.present)
    }

    /// Member (present or not) in slot `slot`.
    pub fn listed_at(&self, slot: usize) -> Option<&Member> {
        self.members.iter().find(|m| m.role.slot() == slot)
    }

    pub fn present_roles(&self) -> Vec<MemberRole> {
        self.members.iter().filter(|m| m.present).map(|m| m.role).collect()
    }

    /// Observed value of phenotype `k` at canonical slot `slot`.
    pub fn value(&self, slot: usize, k: usize) -> Option<f64> {
        self.member_at(slot).and_then(|m| m.observed(k))
    }
}

/// Symmetric kinship (relatedness) matrix over a list of roles.
#[derive(Debug, Clone, PartialEq)]
pub struct KinshipMatrix {
    roles: Vec<MemberRole>,
    entries: DMatrix<f64>,
}

impl KinshipMatrix {
    pub fn roles(&self) -> &[MemberRole] {
        &self.roles
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[(i, j)]
    }

    /// Builds a kinship matrix from explicit entries, validating unit
    /// diagonal, symmetry and the `[0, 1]` range.
    pub fn from_entries(roles: Vec<MemberRole>, entries: DMatrix<f64>) -> Result<Self> {
        let n = roles.len();
        if entries.nrows() != n || entries.ncols() != n {
            return Err(Error::Dimension(format!(
                "kinship matrix is {}x{}, expected {n}x{n}",
                entries.nrows(),
                entries.ncols()
            )));
        }
        for i in 0..n {
            if entries[(i, i)] != 1.0 {
                return Err(Error::InvalidPedigree("kinship diagonal must be 1".into()));
            }
            for j in 0..n {
                let v = entries[(i, j)];
                if !(0.0..=1.0).contains(&v) || v != entries[(j, i)] {
                    return Err(Error::InvalidPedigree(format!(
                        "kinship entry ({i},{j}) = {v} is not symmetric in [0,1]"
                    )));
                }
            }
        }
        Ok(KinshipMatrix { roles, entries })
    }

    /// Restriction to the given roles (which must all be present here).
    pub fn restrict(&self, roles: &[MemberRole]) -> Result<KinshipMatrix> {
        let idx: Vec<usize> = roles
            .iter()
            .map(|r| {
                self.roles
                    .iter()
                    .position(|x| x == r)
                    .ok_or_else(|| Error::InvalidPedigree(format!("role {r} not in kinship template")))
            })
            .collect::<Result<_>>()?;
        let entries = DMatrix::from_fn(idx.len(), idx.len(), |a, b| self.entries[(idx[a], idx[b])]);
        Ok(KinshipMatrix {
            roles: roles.to_vec(),
            entries,
        })
    }
}

/// Kinship coefficient implied by a pair of nuclear-family roles.
fn role_kinship(a: MemberRole, b: MemberRole) -> f64 {
    if a == b {
        1.0
    } else if a.is_parent() && b.is_parent() {
        0.0
    } else {
        0.5
    }
}

/// Builds the declared kinship matrix for a nuclear family: unrelated
/// parents, parent-child and sibling pairs at one half.
pub fn build_kinship(roles: &[MemberRole]) -> Result<KinshipMatrix> {
    if roles.is_empty() {
        return Err(Error::InvalidPedigree("empty role list".into()));
    }
    let mut sorted = roles.to_vec();
    sorted.sort();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::InvalidPedigree(format!("duplicate role in {roles:?}")));
    }
    let n = roles.len();
    let entries = DMatrix::from_fn(n, n, |i, j| role_kinship(roles[i], roles[j]));
    Ok(KinshipMatrix {
        roles: roles.to_vec(),
        entries,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct KinshipClass {
    pub value: f64,
    /// Unordered member-index pairs `(j, s)` with `j < s`.
    pub pairs: Vec<(usize, usize)>,
}

impl KinshipClass {
    pub fn count(&self) -> usize {
        self.pairs.len()
    }
}

/// Partition of the off-diagonal pairs of a kinship matrix by value,
/// ordered by decreasing kinship.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct KinshipClasses {
    pub classes: Vec<KinshipClass>,
}

impl KinshipClasses {
    pub fn total_pairs(&self) -> usize {
        self.classes.iter().map(KinshipClass::count).sum()
    }

    pub fn count_for(&self, value: f64) -> usize {
        self.classes
            .iter()
            .find(|c| c.value == value)
            .map_or(0, KinshipClass::count)
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

pub fn kinship_classes(kinship: &KinshipMatrix) -> KinshipClasses {
    let n = kinship.len();
    let mut classes: Vec<KinshipClass> = Vec::new();
    for j in 0..n {
        for s in (j + 1)..n {
            let v = kinship.get(j, s);
            match classes.iter_mut().find(|c| c.value == v) {
                Some(c) => c.pairs.push((j, s)),
                None => classes.push(KinshipClass {
                    value: v,
                    pairs: vec![(j, s)],
                }),
            }
        }
    }
    classes.sort_by(|a, b| b.value.total_cmp(&a.value));
    KinshipClasses { classes }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportingErrorMode {
    /// A parent of the family is a full sibling of a parent of another
    /// family in the cohort.
    CrossFamilyParent,
    /// The two children are unrelated to each other and to `Parent2`.
    UnrelatedChildren,
}

impl FromStr for ReportingErrorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "cross_family_parent" | "1" => Ok(ReportingErrorMode::CrossFamilyParent),
            "unrelated_children" | "2" => Ok(ReportingErrorMode::UnrelatedChildren),
            other => Err(Error::Domain(format!("unknown reporting-error mode `{other}`"))),
        }
    }
}

/// A misdeclared relationship affecting how phenotypes are generated. The
/// declared kinship template is never modified.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ReportingError {
    /// The linked parents of these families are full siblings.
    LinkedParents {
        families: Vec<usize>,
    },
    UnrelatedChildren {
        family: usize,
    },
}

/// A group of families whose phenotypes must be drawn jointly, with the
/// generative kinship over the concatenated present members.
#[derive(Debug, Clone)]
pub struct GenerativeBlock {
    pub families: Vec<usize>,
    /// `(family index, canonical slot)` for every row of `kinship`.
    pub members: Vec<(usize, usize)>,
    pub kinship: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct Cohort {
    pub families: Vec<FamilyRecord>,
    pub spec: ModelSpec,
    pub kinship_template: KinshipMatrix,
    pub reporting_errors: Vec<ReportingError>,
}

impl Cohort {
    pub fn new(families: Vec<FamilyRecord>, spec: ModelSpec) -> Result<Self> {
        for f in &families {
            for m in &f.members {
                if m.covariates.len() != spec.k() || m.phenotypes.len() != spec.k() {
                    return Err(Error::Dimension(format!(
                        "family {}: member {} carries {} covariate blocks / {} phenotypes for K = {}",
                        f.family_id,
                        m.role,
                        m.covariates.len(),
                        m.phenotypes.len(),
                        spec.k()
                    )));
                }
                for (k, x) in m.covariates.iter().enumerate() {
                    if x.len() != spec.covariate_dim[k] {
                        return Err(Error::Dimension(format!(
                            "family {}: member {} has {} covariates for phenotype {}, expected {}",
                            f.family_id,
                            m.role,
                            x.len(),
                            k + 1,
                            spec.covariate_dim[k]
                        )));
                    }
                    if m.present && x.iter().any(|v| !v.is_finite()) {
                        return Err(Error::Schema(format!("family {}: non-finite covariate", f.family_id)));
                    }
                }
                for (k, y) in m.phenotypes.iter().enumerate() {
                    if let (Some(y), PhenotypeKind::Binary) = (y, spec.kinds[k]) {
                        if *y != 0.0 && *y != 1.0 {
                            return Err(Error::Schema(format!(
                                "family {}: binary phenotype {} has value {y}",
                                f.family_id,
                                k + 1
                            )));
                        }
                    }
                }
            }
        }
        Ok(Cohort {
            families,
            spec,
            kinship_template: build_kinship(&MemberRole::ALL)?,
            reporting_errors: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.families.len()
    }

    pub fn is_empty(&self) -> bool {
        self.families.is_empty()
    }

    /// Declared kinship among the present members of family `i`.
    pub fn declared_kinship(&self, i: usize) -> Result<KinshipMatrix> {
        self.kinship_template.restrict(&self.families[i].present_roles())
    }

    /// Generative kinship blocks, honouring any reporting errors. Families
    /// untouched by reporting errors form singleton blocks with their
    /// declared kinship.
    pub fn generative_blocks(&self) -> Vec<GenerativeBlock> {
        let n = self.families.len();
        let mut unrelated = vec![false; n];
        let mut group_of: Vec<Option<usize>> = vec![None; n];
        let mut groups: Vec<Vec<usize>> = Vec::new();
        for e in &self.reporting_errors {
            match e {
                ReportingError::UnrelatedChildren { family } => unrelated[*family] = true,
                ReportingError::LinkedParents { families } => {
                    // merge with any group a member already belongs to
                    let mut merged: Vec<usize> = families.clone();
                    let mut absorbed: Vec<usize> = families.iter().filter_map(|&f| group_of[f]).collect();
                    absorbed.sort_unstable();
                    absorbed.dedup();
                    for &g in absorbed.iter().rev() {
                        merged.append(&mut groups[g]);
                    }
                    merged.sort_unstable();
                    merged.dedup();
                    let id = groups.len();
                    for &f in &merged {
                        group_of[f] = Some(id);
                    }
                    groups.push(merged);
                }
            }
        }

        let within = |i: usize| -> (Vec<usize>, DMatrix<f64>) {
            let fam = &self.families[i];
            let slots: Vec<usize> = fam.present_roles().iter().map(|r| r.slot()).collect();
            let mut c = DMatrix::from_fn(slots.len(), slots.len(), |a, b| {
                self.kinship_template.get(slots[a], slots[b])
            });
            if unrelated[i] {
                for a in 0..slots.len() {
                    for b in 0..slots.len() {
                        if a == b {
                            continue;
                        }
                        let (sa, sb) = (slots[a], slots[b]);
                        let child_pair = sa >= 2 && sb >= 2;
                        let child_p2 = (sa >= 2 && sb == 1) || (sa == 1 && sb >= 2);
                        if child_pair || child_p2 {
                            c[(a, b)] = 0.0;
                        }
                    }
                }
            }
            (slots, c)
        };

        let mut blocks = Vec::new();
        let mut emitted = vec![false; n];
        for i in 0..n {
            if emitted[i] {
                continue;
            }
            let fams: Vec<usize> = match group_of[i] {
                Some(g) => groups[g].clone(),
                None => vec![i],
            };
            let parts: Vec<(usize, Vec<usize>, DMatrix<f64>)> = fams
                .iter()
                .map(|&f| {
                    let (s, c) = within(f);
                    (f, s, c)
                })
                .collect();
            let total: usize = parts.iter().map(|p| p.1.len()).sum();
            let mut kin = DMatrix::zeros(total, total);
            let mut members = Vec::with_capacity(total);
            let mut offsets = Vec::with_capacity(parts.len());
            let mut off = 0;
            for (f, slots, c) in &parts {
                offsets.push(off);
                for (a, &s) in slots.iter().enumerate() {
                    members.push((*f, s));
                    for b in 0..slots.len() {
                        kin[(off + a, off + b)] = c[(a, b)];
                    }
                }
                off += slots.len();
            }
            // relatedness to the linked parent of each family
            let link = |slots: &[usize], c: &DMatrix<f64>| -> Vec<f64> {
                match slots.iter().position(|&s| s <= 1) {
                    Some(p) => (0..slots.len()).map(|a| c[(a, p)]).collect(),
                    None => vec![0.0; slots.len()],
                }
            };
            for x in 0..parts.len() {
                for y in 0..parts.len() {
                    if x == y {
                        continue;
                    }
                    let lx = link(&parts[x].1, &parts[x].2);
                    let ly = link(&parts[y].1, &parts[y].2);
                    for a in 0..lx.len() {
                        for b in 0..ly.len() {
                            kin[(offsets[x] + a, offsets[y] + b)] = lx[a] * 0.5 * ly[b];
                        }
                    }
                }
            }
            for &f in &fams {
                emitted[f] = true;
            }
            blocks.push(GenerativeBlock {
                families: fams,
                members,
                kinship: kin,
            });
        }
        blocks
    }

    /// Restriction to a subset of phenotypes, keeping families, weights and
    /// reporting errors.
    pub fn select_phenotypes(&self, phenotypes: &[usize]) -> Result<Cohort> {
        if phenotypes.is_empty() || phenotypes.iter().any(|&k| k >= self.spec.k()) {
            return Err(Error::Domain(format!("invalid phenotype selection {phenotypes:?}")));
        }
        let families = self
            .families
            .iter()
            .map(|f| {
                let mut f = f.clone();
                for m in &mut f.members {
                    m.covariates = phenotypes.iter().map(|&k| m.covariates[k].clone()).collect();
                    m.phenotypes = phenotypes.iter().map(|&k| m.phenotypes[k]).collect();
                }
                f
            })
            .collect();
        Ok(Cohort {
            families,
            spec: self.spec.select(phenotypes),
            kinship_template: self.kinship_template.clone(),
            reporting_errors: self.reporting_errors.clone(),
        })
    }

    /// Number of distinct families touched by reporting errors.
    pub fn perturbed_families(&self) -> usize {
        let mut seen = vec![false; self.families.len()];
        for e in &self.reporting_errors {
            match e {
                ReportingError::UnrelatedChildren { family } => seen[*family] = true,
                ReportingError::LinkedParents { families } => {
                    for &f in families {
                        seen[f] = true;
                    }
                }
            }
        }
        seen.into_iter().filter(|&s| s).count()
    }
}

/// Marks a fraction `rate` of families as carrying misreported
/// relationships. Only the generative kinship changes; the declared
/// template the estimators see is left as is.
///
/// For [`ReportingErrorMode::CrossFamilyParent`] the selected families are
/// linked in pairs (a trailing odd family joins the last pair). A single
/// selected family is linked to one extra, randomly chosen family.
pub fn apply_reporting_error<R: Rng + ?Sized>(
    cohort: &Cohort,
    rate: f64,
    mode: ReportingErrorMode,
    rng: &mut R,
) -> Result<Cohort> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Domain(format!("reporting-error rate {rate} outside [0, 1]")));
    }
    let n = cohort.len();
    let count = ((rate * n as f64).round() as usize).min(n);
    let mut out = cohort.clone();
    if count == 0 {
        return Ok(out);
    }
    let mut chosen = sample(rng, n, count).into_vec();
    match mode {
        ReportingErrorMode::UnrelatedChildren => {
            chosen.sort_unstable();
            out.reporting_errors.extend(
                chosen
                    .into_iter()
                    .map(|family| ReportingError::UnrelatedChildren { family }),
            );
        }
        ReportingErrorMode::CrossFamilyParent => {
            if chosen.len() == 1 {
                if n < 2 {
                    return Err(Error::Domain(
                        "cross-family reporting error needs at least two families".into(),
                    ));
                }
                let mut other = rng.random_range(0..n - 1);
                if other >= chosen[0] {
                    other += 1;
                }
                chosen.push(other);
            }
            let mut groups: Vec<Vec<usize>> = chosen.chunks(2).map(|c| c.to_vec()).collect();
            if let Some(tail) = groups.pop_if(|g| g.len() == 1) {
                groups.last_mut().unwrap().extend(tail);
            }
            for mut g in groups {
                g.sort_unstable();
                out.reporting_errors.push(ReportingError::LinkedParents { families: g });
            }
        }
    }
    Ok(out)
}

fn parse_bool(s: &str) -> Result<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "t" => Ok(true),
        "0" | "false" | "no" | "f" => Ok(false),
        other => Err(Error::Schema(format!("cannot parse `{other}` as a flag"))),
    }
}

fn parse_f64(s: &str, what: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| Error::Schema(format!("cannot parse {what} `{s}` as a number")))
}

/// Reads a cohort from the member-per-row CSV layout
/// `family_id, role, weight, present, x1..xp, y1..yK`. Every phenotype
/// shares the same covariate columns.
pub fn read_cohort_csv<R: Read>(reader: R, kinds: &[PhenotypeKind]) -> Result<Cohort> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let cols: Vec<&str> = headers.iter().map(str::trim).collect();
    if cols.len() < 4 || cols[..4] != ["family_id", "role", "weight", "present"] {
        return Err(Error::Schema(
            "header must start with family_id,role,weight,present".into(),
        ));
    }
    let x_cols: Vec<usize> = (4..cols.len()).filter(|&i| cols[i].starts_with('x')).collect();
    let y_cols: Vec<usize> = (4..cols.len()).filter(|&i| cols[i].starts_with('y')).collect();
    if x_cols.len() + y_cols.len() + 4 != cols.len() {
        return Err(Error::Schema("unexpected column (expected x1..xp, y1..yK)".into()));
    }
    for (n, &i) in x_cols.iter().enumerate() {
        if cols[i] != format!("x{}", n + 1) {
            return Err(Error::Schema(format!("covariate column {} is `{}`", n + 1, cols[i])));
        }
    }
    for (n, &i) in y_cols.iter().enumerate() {
        if cols[i] != format!("y{}", n + 1) {
            return Err(Error::Schema(format!("phenotype column {} is `{}`", n + 1, cols[i])));
        }
    }
    if y_cols.len() != kinds.len() {
        return Err(Error::Schema(format!(
            "{} phenotype columns but {} phenotype kinds supplied",
            y_cols.len(),
            kinds.len()
        )));
    }
    let p = x_cols.len();
    let k = y_cols.len();

    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, (f64, Vec<Member>)> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let fid = rec.get(0).unwrap_or("").trim().to_string();
        if fid.is_empty() {
            return Err(Error::Schema("empty family_id".into()));
        }
        let role: MemberRole = rec.get(1).unwrap_or("").parse()?;
        let weight_cell = rec.get(2).unwrap_or("").trim();
        let weight = if weight_cell.is_empty() {
            1.0
        } else {
            parse_f64(weight_cell, "weight")?
        };
        let present = parse_bool(rec.get(3).unwrap_or(""))?;
        let mut x = Vec::with_capacity(p);
        for &i in &x_cols {
            let cell = rec.get(i).unwrap_or("").trim();
            if cell.is_empty() {
                if present {
                    return Err(Error::Schema(format!(
                        "family {fid}: present member {role} has an empty covariate"
                    )));
                }
                x.push(0.0);
            } else {
                x.push(parse_f64(cell, "covariate")?);
            }
        }
        let mut y = Vec::with_capacity(k);
        for &i in &y_cols {
            let cell = rec.get(i).unwrap_or("").trim();
            y.push(if cell.is_empty() {
                None
            } else {
                Some(parse_f64(cell, "phenotype")?)
            });
        }
        let member = Member {
            role,
            covariates: vec![x; k],
            phenotypes: y,
            present,
        };
        match rows.get_mut(&fid) {
            Some((w, ms)) => {
                if *w != weight {
                    return Err(Error::Schema(format!("family {fid}: inconsistent weights")));
                }
                ms.push(member);
            }
            None => {
                order.push(fid.clone());
                rows.insert(fid, (weight, vec![member]));
            }
        }
    }
    let families = order
        .into_iter()
        .map(|fid| {
            let (w, ms) = rows.remove(&fid).expect("family recorded");
            FamilyRecord::new(fid, ms, w)
        })
        .collect::<Result<Vec<_>>>()?;
    let spec = ModelSpec::new(kinds.to_vec(), vec![p; k])?;
    Cohort::new(families, spec)
}

/// Writes a cohort in the layout read by [`read_cohort_csv`]. Covariates of
/// the first phenotype are written; all phenotypes must share them.
pub fn write_cohort_csv<W: Write>(cohort: &Cohort, writer: W) -> Result<()> {
    let k = cohort.spec.k();
    let p = cohort.spec.covariate_dim.first().copied().unwrap_or(0);
    if cohort.spec.covariate_dim.iter().any(|&d| d != p) {
        return Err(Error::Schema(
            "CSV layout needs the same covariates for every phenotype".into(),
        ));
    }
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec![
        "family_id".to_string(),
        "role".into(),
        "weight".into(),
        "present".into(),
    ];
    header.extend((1..=p).map(|i| format!("x{i}")));
    header.extend((1..=k).map(|i| format!("y{i}")));
    w.write_record(&header)?;
    for f in &cohort.families {
        for m in &f.members {
            let mut row = vec![
                f.family_id.clone(),
                m.role.to_string(),
                format!("{}", f.weight),
                if m.present { "1".into() } else { "0".into() },
            ];
            row.extend(m.covariates[0].iter().map(|v| format!("{v}")));
            row.extend(
                m.phenotypes
                    .iter()
                    .map(|y| y.map(|v| format!("{v}")).unwrap_or_default()),
            );
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}
