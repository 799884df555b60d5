//! Microservice register: service descriptors, alias spellings, the strict
//! validator that turns parsed text into typed invocations, and the runtime
//! executor.

mod command;
mod execute;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use command::{format_arg, format_call, parse_command, ArgValue, InvocationDraft, SyntaxError};
pub use execute::{execute, ExecutionResult, ExecutionStatus, Handover};

use crate::time::Millis;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegistryError {
    #[error("service {0:?} is already registered")]
    DuplicateService(String),
    #[error("unknown service {0:?}")]
    UnknownService(String),
    #[error("alias {alias:?}: {message}")]
    InvalidAlias { alias: String, message: String },
    #[error("service {service:?}: {message}")]
    InvalidDescriptor { service: String, message: String },
    #[error("registry file: {0}")]
    Format(String),
}

/// Why a parsed command is not executable.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ValidationError {
    #[error("unknown service {0:?}")]
    UnknownService(String),
    #[error("{service} takes {min}..={max} arguments, got {got}")]
    ArityMismatch { service: String, min: usize, max: usize, got: usize },
    #[error("{service}: argument {param} = {value:?} {reason}")]
    DomainViolation { service: String, param: String, value: String, reason: String },
}

impl ValidationError {
    pub fn class(&self) -> &'static str {
        match self {
            ValidationError::UnknownService(_) => "UnknownService",
            ValidationError::ArityMismatch { .. } => "ArityMismatch",
            ValidationError::DomainViolation { .. } => "DomainViolation",
        }
    }
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParamKind {
    Enum { values: Vec<String> },
    Integer { min: i64, max: i64 },
    String,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: ParamKind,
    /// Value used when the argument is omitted. Only trailing parameters may
    /// have one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<String>,
}

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum ServiceTarget {
    Station,
    AgentLocal,
    System,
}

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum Effect {
    Actuation,
    Sensing,
    Communication,
    Timing,
    NoOp,
    Alert,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum DurationModel {
    Immediate,
    /// Duration in whole seconds taken from the named parameter.
    Timed(String),
}

/// Prompt-facing rendering of a catalog line. Missing parts fall back to the
/// descriptor.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq, Default)]
pub struct CatalogEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signature: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

fn yes() -> bool {
    true
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct ServiceDescriptor {
    pub name: String,
    #[serde(default)]
    pub params: Vec<ParamSpec>,
    pub description: String,
    pub target: ServiceTarget,
    pub effect: Effect,
    #[serde(default = "immediate")]
    pub duration_model: DurationModel,
    /// Whether executing the service logs "Operator agent calls the operation ...".
    #[serde(default = "yes")]
    pub announce: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub catalog: Option<CatalogEntry>,
}

fn immediate() -> DurationModel {
    DurationModel::Immediate
}

impl ServiceDescriptor {
    pub fn signature(&self) -> String {
        let names: Vec<&str> = self.params.iter().map(|p| p.name.as_str()).collect();
        format!("{}({})", self.name, names.join(", "))
    }

    fn required(&self) -> usize {
        self.params.iter().filter(|p| p.default.is_none()).count()
    }

    fn check(&self) -> Result<(), RegistryError> {
        let bad = |message: &str| RegistryError::InvalidDescriptor {
            service: self.name.clone(),
            message: message.to_string(),
        };
        if self.name.is_empty() || !self.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            return Err(bad("name must be a non-empty identifier"));
        }
        let mut seen_default = false;
        for p in &self.params {
            match &p.kind {
                ParamKind::Enum { values } if values.is_empty() => return Err(bad("enum domain is empty")),
                ParamKind::Integer { min, max } if min > max => return Err(bad("integer range is empty")),
                _ => {}
            }
            if p.default.is_some() {
                seen_default = true;
            } else if seen_default {
                return Err(bad("parameters with defaults must be trailing"));
            }
        }
        if let DurationModel::Timed(param) = &self.duration_model {
            if !self.params.iter().any(|p| &p.name == param) {
                return Err(bad("duration model names an unknown parameter"));
            }
        }
        Ok(())
    }
}

/// Alternate spelling of a registered service, optionally supplying leading
/// arguments.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct Alias {
    pub name: String,
    pub canonical: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub prefix_args: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub catalog: Option<CatalogEntry>,
}

#[derive(Clone, Debug, Default)]
pub struct AliasTable {
    aliases: BTreeMap<String, Alias>,
}

impl AliasTable {
    pub fn get(&self, name: &str) -> Option<&Alias> {
        self.aliases.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Alias> {
        self.aliases.values()
    }

    pub fn len(&self) -> usize {
        self.aliases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.aliases.is_empty()
    }
}

/// A validated call. `args` always has one entry per descriptor parameter.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq, Eq)]
pub struct Invocation {
    pub service: String,
    pub args: Vec<ArgValue>,
    #[serde(default)]
    pub issued_by: String,
    #[serde(default)]
    pub at: Millis,
    /// Station or AGV the issuing agent controls.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub station: Option<String>,
}

impl Invocation {
    pub fn new(service: impl Into<String>, args: Vec<ArgValue>) -> Self {
        Self { service: service.into(), args, issued_by: String::new(), at: 0, station: None }
    }

    pub fn issued(mut self, agent: &str, at: Millis, station: Option<&str>) -> Self {
        self.issued_by = agent.to_string();
        self.at = at;
        self.station = station.map(str::to_string);
        self
    }

    pub fn int_arg(&self, index: usize) -> Option<i64> {
        self.args.get(index).and_then(ArgValue::as_int)
    }

    pub fn text_arg(&self, index: usize) -> Option<&str> {
        self.args.get(index).and_then(ArgValue::as_text)
    }
}

impl fmt::Display for Invocation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&format_call(&self.service, &self.args))
    }
}

#[derive(Serialize, Deserialize, Default)]
pub struct RegistryFile {
    #[serde(default)]
    pub services: Vec<ServiceDescriptor>,
    #[serde(default)]
    pub aliases: Vec<Alias>,
}

/// Lookup table of services plus the alias table. Immutable once built.
#[derive(Clone, Debug, Default)]
pub struct Registry {
    services: BTreeMap<String, ServiceDescriptor>,
    order: Vec<String>,
    aliases: AliasTable,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_json(text: &str) -> Result<Self, RegistryError> {
        let file: RegistryFile = serde_json::from_str(text).map_err(|e| RegistryError::Format(e.to_string()))?;
        let mut registry = Registry::new();
        for service in file.services {
            registry.register(service)?;
        }
        for alias in file.aliases {
            registry.register_alias(alias)?;
        }
        Ok(registry)
    }

    pub fn register(&mut self, descriptor: ServiceDescriptor) -> Result<(), RegistryError> {
        if self.services.contains_key(&descriptor.name) || self.aliases.aliases.contains_key(&descriptor.name) {
            return Err(RegistryError::DuplicateService(descriptor.name));
        }
        descriptor.check()?;
        self.order.push(descriptor.name.clone());
        self.services.insert(descriptor.name.clone(), descriptor);
        Ok(())
    }

    pub fn register_alias(&mut self, alias: Alias) -> Result<(), RegistryError> {
        let invalid = |message: &str| RegistryError::InvalidAlias {
            alias: alias.name.clone(),
            message: message.to_string(),
        };
        if self.services.contains_key(&alias.name) || self.aliases.aliases.contains_key(&alias.name) {
            return Err(RegistryError::DuplicateService(alias.name));
        }
        let Some(target) = self.services.get(&alias.canonical) else {
            return Err(invalid("canonical service is not registered (alias chains are not allowed)"));
        };
        if alias.prefix_args.len() > target.params.len() {
            return Err(invalid("more prefix arguments than parameters"));
        }
        self.aliases.aliases.insert(alias.name.clone(), alias);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ServiceDescriptor> {
        self.services.get(name)
    }

    pub fn aliases(&self) -> &AliasTable {
        &self.aliases
    }

    /// Services in registration order.
    pub fn services(&self) -> impl Iterator<Item = &ServiceDescriptor> {
        self.order.iter().map(|n| &self.services[n])
    }

    pub fn contains(&self, name: &str) -> bool {
        self.services.contains_key(name) || self.aliases.aliases.contains_key(name)
    }

    /// Canonical service name for a service or alias spelling.
    pub fn canonical_name<'a>(&'a self, name: &'a str) -> Option<&'a str> {
        if self.services.contains_key(name) {
            Some(name)
        } else {
            self.aliases.get(name).map(|a| a.canonical.as_str())
        }
    }

    /// Resolves aliases, checks arity, and coerces every argument into its
    /// declared kind and domain. Never mutates anything.
    pub fn validate(&self, draft: &InvocationDraft) -> Result<Invocation, ValidationError> {
        let (descriptor, args) = self.resolve(draft)?;
        let min = descriptor.required();
        let max = descriptor.params.len();
        if args.len() < min || args.len() > max {
            return Err(ValidationError::ArityMismatch {
                service: descriptor.name.clone(),
                min,
                max,
                got: args.len(),
            });
        }
        let mut typed = Vec::with_capacity(max);
        for (i, param) in descriptor.params.iter().enumerate() {
            let raw = match args.get(i) {
                Some(raw) => raw.as_str(),
                None => param.default.as_deref().expect("arity checked"),
            };
            typed.push(coerce(&descriptor.name, param, raw)?);
        }
        Ok(Invocation::new(descriptor.name.clone(), typed))
    }

    /// Alias resolution only: canonical descriptor and the full raw argument list.
    pub fn resolve<'a>(
        &'a self,
        draft: &InvocationDraft,
    ) -> Result<(&'a ServiceDescriptor, Vec<String>), ValidationError> {
        if let Some(descriptor) = self.services.get(&draft.name) {
            return Ok((descriptor, draft.args.clone()));
        }
        let alias = self
            .aliases
            .get(&draft.name)
            .ok_or_else(|| ValidationError::UnknownService(draft.name.clone()))?;
        let descriptor = &self.services[&alias.canonical];
        let mut args = alias.prefix_args.clone();
        args.extend(draft.args.iter().cloned());
        Ok((descriptor, args))
    }

    /// Convenience: parse then validate.
    pub fn parse_and_validate(&self, text: &str) -> Result<Invocation, CommandError> {
        let draft = parse_command(text)?;
        Ok(self.validate(&draft)?)
    }

    /// Renders the prompt block listing `allowed` names (services or aliases),
    /// one paragraph per name, in the given order.
    pub fn render_catalog(&self, allowed: &[String]) -> Result<String, RegistryError> {
        let mut lines = Vec::with_capacity(allowed.len());
        for name in allowed {
            let (fallback_sig, fallback_desc, entry) = if let Some(d) = self.services.get(name) {
                (d.signature(), d.description.clone(), d.catalog.clone())
            } else if let Some(alias) = self.aliases.get(name) {
                let d = &self.services[&alias.canonical];
                let params: Vec<&str> =
                    d.params.iter().skip(alias.prefix_args.len()).map(|p| p.name.as_str()).collect();
                (format!("{}({})", alias.name, params.join(", ")), d.description.clone(), alias.catalog.clone())
            } else {
                return Err(RegistryError::UnknownService(name.clone()));
            };
            let entry = entry.unwrap_or_default();
            let signature = entry.signature.unwrap_or(fallback_sig);
            let description = entry.description.unwrap_or(fallback_desc);
            lines.push(format!("`{signature}`: {description}"));
        }
        Ok(lines.join("\n\n"))
    }
}

/// Either stage of turning text into an invocation.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum CommandError {
    #[error(transparent)]
    Syntax(#[from] SyntaxError),
    #[error(transparent)]
    Invalid(#[from] ValidationError),
}

impl CommandError {
    pub fn class(&self) -> &'static str {
        match self {
            CommandError::Syntax(_) => "SyntaxError",
            CommandError::Invalid(e) => e.class(),
        }
    }
}

fn coerce(service: &str, param: &ParamSpec, raw: &str) -> Result<ArgValue, ValidationError> {
    let violation = |reason: String| ValidationError::DomainViolation {
        service: service.to_string(),
        param: param.name.clone(),
        value: raw.to_string(),
        reason,
    };
    match &param.kind {
        ParamKind::Enum { values } => {
            if values.iter().any(|v| v == raw) {
                Ok(ArgValue::Text(raw.to_string()))
            } else {
                Err(violation(format!("is not one of {values:?}")))
            }
        }
        ParamKind::Integer { min, max } => {
            let value: i64 = raw.trim().parse().map_err(|_| violation("is not an integer".into()))?;
            if value < *min || value > *max {
                Err(violation(format!("is outside {min}..={max}")))
            } else {
                Ok(ArgValue::Int(value))
            }
        }
        ParamKind::String => Ok(ArgValue::Text(raw.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conveyor_run() -> ServiceDescriptor {
        ServiceDescriptor {
            name: "conveyor_belt_run".into(),
            params: vec![
                ParamSpec {
                    name: "direction".into(),
                    kind: ParamKind::Enum { values: vec!["forward".into(), "backward".into()] },
                    default: None,
                },
                ParamSpec { name: "duration".into(), kind: ParamKind::Integer { min: 1, max: 3600 }, default: None },
            ],
            description: "Moves the conveyor belt in the specified direction ('forward' or 'backward') for a set duration in seconds.".into(),
            target: ServiceTarget::Station,
            effect: Effect::Actuation,
            duration_model: DurationModel::Timed("duration".into()),
            announce: true,
            catalog: None,
        }
    }

    fn simple(name: &str, effect: Effect) -> ServiceDescriptor {
        ServiceDescriptor {
            name: name.into(),
            params: vec![],
            description: format!("{name} description."),
            target: ServiceTarget::System,
            effect,
            duration_model: DurationModel::Immediate,
            announce: true,
            catalog: None,
        }
    }

    fn registry() -> Registry {
        let mut r = Registry::new();
        r.register(conveyor_run()).unwrap();
        r.register(ServiceDescriptor {
            name: "wait".into(),
            params: vec![ParamSpec {
                name: "duration".into(),
                kind: ParamKind::Integer { min: 1, max: 3600 },
                default: None,
            }],
            description: "Pauses the current operation for a set duration in seconds.".into(),
            target: ServiceTarget::AgentLocal,
            effect: Effect::Timing,
            duration_model: DurationModel::Timed("duration".into()),
            announce: true,
            catalog: None,
        })
        .unwrap();
        r.register(simple("pass", Effect::NoOp)).unwrap();
        r.register_alias(Alias {
            name: "activate_conveyor".into(),
            canonical: "conveyor_belt_run".into(),
            prefix_args: vec![],
            catalog: None,
        })
        .unwrap();
        r
    }

    fn draft(name: &str, args: &[&str]) -> InvocationDraft {
        InvocationDraft { name: name.into(), args: args.iter().map(|a| a.to_string()).collect() }
    }

    #[test]
    fn duplicate_service_is_rejected() {
        let mut r = registry();
        assert_eq!(r.register(conveyor_run()), Err(RegistryError::DuplicateService("conveyor_belt_run".into())));
        assert!(matches!(
            r.register(simple("activate_conveyor", Effect::NoOp)),
            Err(RegistryError::DuplicateService(_))
        ));
    }

    #[test]
    fn alias_resolves_to_canonical() {
        let inv = registry().validate(&draft("activate_conveyor", &["forward", "10"])).unwrap();
        assert_eq!(inv.to_string(), "conveyor_belt_run(forward, 10)");
        assert_eq!(inv.int_arg(1), Some(10));
    }

    #[test]
    fn alias_chains_are_rejected() {
        let mut r = registry();
        let err = r
            .register_alias(Alias {
                name: "go".into(),
                canonical: "activate_conveyor".into(),
                prefix_args: vec![],
                catalog: None,
            })
            .unwrap_err();
        assert!(matches!(err, RegistryError::InvalidAlias { .. }));
    }

    #[test]
    fn error_classes() {
        let r = registry();
        assert_eq!(
            r.validate(&draft("conveyor_belt_run", &["sideways", "10"])).unwrap_err().class(),
            "DomainViolation"
        );
        assert_eq!(r.validate(&draft("conveyor_belt_run", &["forward", "0"])).unwrap_err().class(), "DomainViolation");
        assert_eq!(r.validate(&draft("wait", &["soon"])).unwrap_err().class(), "DomainViolation");
        assert_eq!(r.validate(&draft("teleport_workpiece", &[])).unwrap_err().class(), "UnknownService");
        assert_eq!(r.validate(&draft("pass", &["x"])).unwrap_err().class(), "ArityMismatch");
        assert_eq!(r.parse_and_validate("wait(5").unwrap_err().class(), "SyntaxError");
    }

    #[test]
    fn validation_is_idempotent() {
        let r = registry();
        let once = r.validate(&draft("activate_conveyor", &["backward", "3"])).unwrap();
        let twice = r.parse_and_validate(&once.to_string()).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn catalog_rendering() {
        let r = registry();
        assert_eq!(r.render_catalog(&[]).unwrap(), "");
        assert_eq!(r.render_catalog(&["pass".into()]).unwrap(), "`pass()`: pass description.");
        assert_eq!(
            r.render_catalog(&["wait".into(), "activate_conveyor".into()]).unwrap(),
            "`wait(duration)`: Pauses the current operation for a set duration in seconds.\n\n\
             `activate_conveyor(direction, duration)`: Moves the conveyor belt in the specified direction ('forward' or 'backward') for a set duration in seconds."
        );
        assert_eq!(r.render_catalog(&["nope".into()]), Err(RegistryError::UnknownService("nope".into())));
    }

    #[test]
    fn descriptor_checks() {
        let mut r = Registry::new();
        let mut d = simple("x", Effect::NoOp);
        d.params.push(ParamSpec { name: "e".into(), kind: ParamKind::Enum { values: vec![] }, default: None });
        assert!(matches!(r.register(d), Err(RegistryError::InvalidDescriptor { .. })));
    }
}
