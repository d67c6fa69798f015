use std::fmt;

/// Coefficient of variation of per-rank execution time above which an
/// operation counts as highly variable.
pub const HIGH_VARIANCE_CV: f64 = 0.1;

/// What is known about an operation that is a candidate for decoupling.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct OpProfile {
    /// Coefficient of variation of the operation's per-rank time.
    pub variance: f64,
    /// The operation gets cheaper per unit of work on fewer ranks.
    pub complexity_growth: bool,
    /// The operation produces data steadily rather than at stage ends.
    pub continuous_flow: bool,
    /// The operation needs little or no data from the other operations.
    pub little_dependency: bool,
    /// The operation would run better on special-purpose nodes.
    pub hardware_affinity: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SuitabilityCategory {
    Orthogonal,
    HighComplexity,
    HighVariance,
    ContinuousFlow,
    SpecialHardware,
}

impl SuitabilityCategory {
    pub const ALL: [SuitabilityCategory; 5] = [
        SuitabilityCategory::Orthogonal,
        SuitabilityCategory::HighComplexity,
        SuitabilityCategory::HighVariance,
        SuitabilityCategory::ContinuousFlow,
        SuitabilityCategory::SpecialHardware,
    ];

    /// 1-based position in the checklist.
    pub fn number(self) -> usize {
        SuitabilityCategory::ALL
            .iter()
            .position(|&c| c == self)
            .expect("listed")
            + 1
    }
}

impl fmt::Display for SuitabilityCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SuitabilityCategory::Orthogonal => "orthogonal operation",
            SuitabilityCategory::HighComplexity => "complexity grows with rank count",
            SuitabilityCategory::HighVariance => "large execution time variance",
            SuitabilityCategory::ContinuousFlow => "continuous data flow",
            SuitabilityCategory::SpecialHardware => "benefits from special-purpose nodes",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub category: SuitabilityCategory,
    pub pass: bool,
    pub rationale: String,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}. {}: {} ({})",
            self.category.number(),
            self.category,
            if self.pass { "pass" } else { "fail" },
            self.rationale
        )
    }
}

/// One verdict per category, in checklist order.
pub fn suitability_report(p: &OpProfile) -> Vec<Verdict> {
    let high_variance = p.variance >= HIGH_VARIANCE_CV;
    let verdict = |category, pass: bool, yes: &str, no: &str| Verdict {
        category,
        pass,
        rationale: (if pass { yes } else { no }).to_string(),
    };
    vec![
        verdict(
            SuitabilityCategory::Orthogonal,
            p.little_dependency,
            "no data dependency on other operations, groups can work on separate data",
            "depends on data from other operations",
        ),
        verdict(
            SuitabilityCategory::HighComplexity,
            p.complexity_growth,
            "cost drops when moved to a small group",
            "cost does not depend on the number of ranks",
        ),
        Verdict {
            category: SuitabilityCategory::HighVariance,
            pass: high_variance,
            rationale: if high_variance {
                format!("coefficient of variation {:.3} >= {HIGH_VARIANCE_CV}", p.variance)
            } else {
                format!("coefficient of variation {:.3} < {HIGH_VARIANCE_CV}", p.variance)
            },
        },
        verdict(
            SuitabilityCategory::ContinuousFlow,
            p.continuous_flow,
            "produces data throughout the run, spreading network traffic",
            "data appears only at stage boundaries",
        ),
        verdict(
            SuitabilityCategory::SpecialHardware,
            p.hardware_affinity,
            "can be placed on dedicated nodes",
            "no hardware preference",
        ),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn passing(p: &OpProfile) -> Vec<usize> {
        suitability_report(p)
            .iter()
            .filter(|v| v.pass)
            .map(|v| v.category.number())
            .collect()
    }

    #[test]
    fn word_reduce_profile() {
        let reduce = OpProfile {
            variance: 0.6,
            complexity_growth: true,
            continuous_flow: true,
            little_dependency: false,
            hardware_affinity: false,
        };
        assert_eq!(passing(&reduce), vec![2, 3, 4]);
    }

    #[test]
    fn particle_io_profile() {
        let io = OpProfile {
            variance: 0.8,
            complexity_growth: true,
            continuous_flow: true,
            little_dependency: false,
            hardware_affinity: false,
        };
        assert_eq!(passing(&io), vec![2, 3, 4]);
    }

    #[test]
    fn independent_operation_is_orthogonal() {
        let p = OpProfile {
            little_dependency: true,
            ..OpProfile::default()
        };
        assert_eq!(passing(&p), vec![1]);
    }

    #[test]
    fn all_false_profile_fails_everything() {
        let none = OpProfile::default();
        assert!(passing(&none).is_empty());
        let report = suitability_report(&none);
        assert_eq!(report.len(), 5);
        assert!(report[2].to_string().starts_with("3. large execution time variance: fail"));
    }
}
