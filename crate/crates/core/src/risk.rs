//! OWASP-style risk rating, the built-in BLE vulnerability catalog, and
//! assessment reports.

use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::pairing::{AssociationMethod, PairingMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Likelihood {
    Low,
    Medium,
    High,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Impact {
    Low,
    Medium,
    High,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Risk {
    Note,
    Low,
    Medium,
    High,
    Critical,
}

impl Likelihood {
    pub const ALL: [Likelihood; 3] = [Likelihood::Low, Likelihood::Medium, Likelihood::High];
}

impl Impact {
    pub const ALL: [Impact; 3] = [Impact::Low, Impact::Medium, Impact::High];
}

macro_rules! display_via_debug {
    ($($t:ty),*) => {$(
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                fmt::Debug::fmt(self, f)
            }
        }
    )*};
}
display_via_debug!(Likelihood, Impact, Risk);

/// Overall risk severity: the two levels are summed, so the matrix is
/// symmetric and each step up in either factor raises risk by one grade.
pub fn rate(likelihood: Likelihood, impact: Impact) -> Risk {
    const GRADES: [Risk; 5] = [Risk::Note, Risk::Low, Risk::Medium, Risk::High, Risk::Critical];
    GRADES[likelihood as usize + impact as usize]
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VulnerabilityFinding {
    pub id: u8,
    pub title: String,
    pub likelihood: Likelihood,
    pub impact: Impact,
    pub risk: Risk,
    pub threat_events: String,
    pub description: String,
    pub mitigation: String,
}

#[allow(clippy::too_many_arguments)]
fn finding(
    id: u8,
    title: &str,
    likelihood: Likelihood,
    impact: Impact,
    risk: Risk,
    threat_events: &str,
    description: &str,
    mitigation: &str,
) -> VulnerabilityFinding {
    VulnerabilityFinding {
        id,
        title: title.into(),
        likelihood,
        impact,
        risk,
        threat_events: threat_events.into(),
        description: description.into(),
        mitigation: mitigation.into(),
    }
}

/// The five BLE 4.1 findings for the fitness scenario, with their published
/// ratings.
pub fn builtin_catalog() -> Vec<VulnerabilityFinding> {
    use Impact as I;
    use Likelihood as L;
    vec![
        finding(
            1,
            "Low energy legacy pairing provides no passive eavesdropping protection.",
            L::High,
            I::High,
            Risk::Critical,
            "Passive Eavesdropping",
            "Eavesdroppers can capture secret keys (i.e., LTK) distributed during low energy pairing.",
            "BLE devices should be paired by using an algorithm that provides a mechanism to exchange keys over an unsecured channel. For instance the ECDH.",
        ),
        finding(
            2,
            "The Just Works pairing method provides no MITM protection.",
            L::High,
            I::High,
            Risk::Critical,
            "MitM attack",
            "MITM attackers can capture and manipulate data transmitted between trusted devices.",
            "Low energy devices should be paired in a secure environment to minimize the risk of eavesdropping and MITM attacks. Just Works pairing should not be used for low energy.",
        ),
        finding(
            3,
            "No user authentication exists.",
            L::Medium,
            I::High,
            Risk::High,
            "Pairing Eavesdropping",
            "Only device authentication is provided by the specification.",
            "Application-level security, including user authentication, can be added via overlay by the application developer.",
        ),
        finding(
            4,
            "End-to-end security is not performed.",
            L::Medium,
            I::Medium,
            Risk::Medium,
            "MitM attack",
            "Only individual links are encrypted and authenticated. Data is decrypted at intermediate points.",
            "End-to-end security on top of the Bluetooth stack can be provided by use of additional security controls.",
        ),
        finding(
            5,
            "Discoverable and/or connectable devices are prone to attack.",
            L::Medium,
            I::High,
            Risk::High,
            "Passive Eavesdropping, MitM attack",
            "A hacker can try to take over any discoverable and/or connectable BLE device, and then he can get access to all the information.",
            "Any device that must go into discoverable or connectable mode to pair or connect should only do so for a minimal amount of time. A device should not be in discoverable or connectable mode all the time.",
        ),
    ]
}

/// Security-relevant properties of a scenario, known before running it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioFacts {
    pub pairing_mode: PairingMode,
    pub association_method: AssociationMethod,
    pub always_discoverable: bool,
    pub user_auth_present: bool,
    pub end_to_end_security: bool,
}

impl ScenarioFacts {
    /// The fitness scenario: legacy Just Works pairing, an always
    /// discoverable sensor, no application-level protections.
    pub fn paper_scenario() -> ScenarioFacts {
        ScenarioFacts {
            pairing_mode: PairingMode::LegacyLe,
            association_method: AssociationMethod::JustWorks,
            always_discoverable: true,
            user_auth_present: false,
            end_to_end_security: false,
        }
    }
}

pub fn applicable_findings(facts: &ScenarioFacts) -> Vec<VulnerabilityFinding> {
    builtin_catalog()
        .into_iter()
        .filter(|f| match f.id {
            1 => facts.pairing_mode == PairingMode::LegacyLe,
            2 => facts.association_method == AssociationMethod::JustWorks,
            3 => !facts.user_auth_present,
            4 => !facts.end_to_end_security,
            5 => facts.always_discoverable,
            _ => false,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RiskReport {
    pub facts: ScenarioFacts,
    pub findings: Vec<VulnerabilityFinding>,
}

impl RiskReport {
    pub fn new(findings: Vec<VulnerabilityFinding>, facts: ScenarioFacts) -> RiskReport {
        RiskReport { facts, findings }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report is plain data");
        s.push('\n');
        s
    }

    /// One two-column table per finding, in catalog order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let f = &self.facts;
        writeln!(out, "BLE security assessment").unwrap();
        writeln!(
            out,
            "pairing mode: {:?}; association: {:?}; always discoverable: {}; user auth: {}; end-to-end security: {}",
            f.pairing_mode,
            f.association_method,
            f.always_discoverable,
            f.user_auth_present,
            f.end_to_end_security
        )
        .unwrap();
        if self.findings.is_empty() {
            writeln!(out, "\nno applicable findings").unwrap();
            return out;
        }
        for v in &self.findings {
            out.push('\n');
            render_table(&mut out, v);
        }
        out
    }
}

const LABEL_WIDTH: usize = 16;
const VALUE_WIDTH: usize = 60;

fn wrap(text: &str, width: usize) -> Vec<String> {
    let mut lines = Vec::new();
    let mut line = String::new();
    for word in text.split_whitespace() {
        if !line.is_empty() && line.len() + 1 + word.len() > width {
            lines.push(std::mem::take(&mut line));
        }
        if !line.is_empty() {
            line.push(' ');
        }
        line.push_str(word);
    }
    if !line.is_empty() || lines.is_empty() {
        lines.push(line);
    }
    lines
}

fn render_table(out: &mut String, v: &VulnerabilityFinding) {
    let rule = format!("+{}+{}+", "-".repeat(LABEL_WIDTH + 2), "-".repeat(VALUE_WIDTH + 2));
    let total = LABEL_WIDTH + VALUE_WIDTH + 3;
    writeln!(out, "{rule}").unwrap();
    writeln!(out, "| {:^total$} |", format!("Vulnerability n.{}", v.id)).unwrap();
    writeln!(out, "{rule}").unwrap();
    let rows = [
        ("Vulnerability", v.title.clone()),
        ("Likelihood", v.likelihood.to_string()),
        ("Technical Impact", v.impact.to_string()),
        ("Risk", v.risk.to_string()),
        ("Threat Event", v.threat_events.clone()),
        ("Description", v.description.clone()),
        ("Mitigation", v.mitigation.clone()),
    ];
    for (label, value) in rows {
        for (i, line) in wrap(&value, VALUE_WIDTH).iter().enumerate() {
            let label = if i == 0 { label } else { "" };
            writeln!(out, "| {label:<LABEL_WIDTH$} | {line:<VALUE_WIDTH$} |").unwrap();
        }
        writeln!(out, "{rule}").unwrap();
    }
}
