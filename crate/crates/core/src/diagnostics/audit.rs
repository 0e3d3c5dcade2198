//! Trainable-parameter accounting, in closed form and by enumeration.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::backbone::{BackboneConfig, BackboneStyle, Category, ModelGraph};
use crate::block::AdapterConfig;
use crate::error::{Error, Result};
use crate::expert::{partition_scope, ParamCount};
use crate::router::GateHead;

/// Stage layout of an architecture plus the published trainable count
/// (millions) to compare against, when there is one.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ArchSpec {
    pub name: String,
    pub style: BackboneStyle,
    pub depths: Vec<usize>,
    pub dims: Vec<usize>,
    pub published_millions: Option<f64>,
}

impl ArchSpec {
    pub const NAMES: [&'static str; 5] = ["toy", "swin-b", "swin-l", "convnext-b", "convnext-l"];

    pub fn named(name: &str) -> Result<Self> {
        let base = [128, 256, 512, 1024];
        let large = [192, 384, 768, 1536];
        let (style, depths, dims, target): (_, &[usize], &[usize], _) = match name {
            "toy" => {
                let d = BackboneConfig::default();
                return Ok(Self::from_backbone("toy", &d));
            }
            "swin-b" => (BackboneStyle::SwinLike, &[2, 2, 18, 2], &base, 5.2),
            "swin-l" => (BackboneStyle::SwinLike, &[2, 2, 18, 2], &large, 7.3),
            "convnext-b" => (BackboneStyle::ConvnextLike, &[3, 3, 27, 3], &base, 6.5),
            "convnext-l" => (BackboneStyle::ConvnextLike, &[3, 3, 27, 3], &large, 9.2),
            _ => {
                return Err(Error::config(format!(
                    "unknown architecture {name:?}; expected one of {:?}",
                    Self::NAMES
                )))
            }
        };
        Ok(ArchSpec {
            name: name.to_string(),
            style,
            depths: depths.to_vec(),
            dims: dims.to_vec(),
            published_millions: Some(target),
        })
    }

    pub fn from_backbone(name: &str, cfg: &BackboneConfig) -> Self {
        ArchSpec {
            name: name.to_string(),
            style: cfg.style,
            depths: cfg.depths.clone(),
            dims: cfg.dims.clone(),
            published_millions: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct AuditItem {
    pub component: String,
    pub tensor: String,
    pub category: Category,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamAudit {
    pub arch: String,
    pub items: Vec<AuditItem>,
    pub totals: BTreeMap<Category, usize>,
    /// Center + router + SA parameters.
    pub grand_total: usize,
    pub published_millions: Option<f64>,
    pub assumptions: Vec<String>,
}

impl ParamAudit {
    fn new(arch: &str, items: Vec<AuditItem>, published: Option<f64>, assumptions: Vec<String>) -> Self {
        let mut totals = BTreeMap::new();
        for it in &items {
            *totals.entry(it.category).or_insert(0) += it.count;
        }
        let grand_total = [Category::Center, Category::Router, Category::Sa]
            .iter()
            .map(|c| totals.get(c).copied().unwrap_or(0))
            .sum();
        ParamAudit {
            arch: arch.to_string(),
            items,
            totals,
            grand_total,
            published_millions: published,
            assumptions,
        }
    }

    pub fn total(&self, c: Category) -> usize {
        self.totals.get(&c).copied().unwrap_or(0)
    }

    /// Relative deviation of the grand total from the published figure.
    pub fn deviation(&self) -> Option<f64> {
        self.published_millions
            .map(|p| (self.grand_total as f64 / 1e6 - p) / p)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("component,tensor,category,count\n");
        for it in &self.items {
            let _ = writeln!(s, "{},{},{},{}", it.component, it.tensor, it.category, it.count);
        }
        s
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "parameter audit: {}", self.arch);
        let mut per_component: Vec<(String, usize)> = Vec::new();
        for it in &self.items {
            let key = it.component.split('.').next().unwrap_or("").to_string();
            match per_component.last_mut() {
                Some((k, n)) if *k == key => *n += it.count,
                _ => per_component.push((key, it.count)),
            }
        }
        for (k, n) in per_component.iter().filter(|(k, _)| k.starts_with("stage")) {
            let _ = writeln!(s, "  {k:<10} {n:>12}");
        }
        for (c, n) in &self.totals {
            let _ = writeln!(s, "  total {:<9} {n:>12}  ({:.3} M)", c.to_string(), *n as f64 / 1e6);
        }
        let _ = writeln!(
            s,
            "  trainable (center + router + sa) {} ({:.3} M)",
            self.grand_total,
            self.grand_total as f64 / 1e6
        );
        if let (Some(p), Some(d)) = (self.published_millions, self.deviation()) {
            let _ = writeln!(
                s,
                "  published: {p:.1} M; computed differs by {:+.3} M ({:+.1}%)",
                self.grand_total as f64 / 1e6 - p,
                100.0 * d
            );
        }
        if !self.assumptions.is_empty() {
            let _ = writeln!(s, "assumptions:");
            for a in &self.assumptions {
                let _ = writeln!(s, "  - {a}");
            }
        }
        s
    }
}

fn spatial_name(i: usize) -> String {
    format!("s_{}", crate::expert::spatial_label(i))
}

/// Closed-form count of every adapter tensor for `arch` under `acfg`.
/// Component and tensor names match those of an instantiated model, so
/// the two ledgers can be compared item by item.
pub fn audit_params(arch: &ArchSpec, acfg: &AdapterConfig) -> Result<ParamAudit> {
    acfg.validate()?;
    if arch.depths.len() != arch.dims.len() || arch.depths.is_empty() {
        return Err(Error::config(format!("architecture {} has inconsistent stages", arch.name)));
    }
    let spb = arch.style.sites_per_block();
    let ks = &acfg.kernel_sizes;
    let n = ks.len();
    let h = acfg.router_hidden;
    let mut items = Vec::new();
    let mut push = |stage: usize, comp: String, tensor: String, category: Category, count: usize| {
        items.push(AuditItem {
            component: format!("stage{stage}.{comp}"),
            tensor,
            category,
            count,
        });
    };
    let (mut center_id, mut site_id) = (0, 0);
    let mut any_full_width = false;
    for (s, (&depth, &c)) in arch.depths.iter().zip(&arch.dims).enumerate() {
        let latent = acfg.latent_for_stage(s);
        any_full_width |= latent >= c;
        let blocks: Vec<usize> = (0..depth).collect();
        for group in partition_scope(&blocks, acfg.group_size.unwrap_or(depth))? {
            let m = acfg.capacity.capacity(group.len());
            let pc = ParamCount::closed_form(m, c, latent, ks);
            let comp = format!("center{center_id}");
            push(s, comp.clone(), "e_a".into(), Category::Center, pc.e_a);
            push(s, comp.clone(), "e_b".into(), Category::Center, pc.e_b);
            for (i, &k) in pc.spatial.iter().enumerate() {
                push(s, comp.clone(), spatial_name(i), Category::Center, k);
            }
            for _ in 0..group.len() * spb {
                let comp = format!("site{site_id}");
                if !acfg.static_routing {
                    push(s, comp.clone(), "router.w_hidden".into(), Category::Router, c * h);
                    push(s, comp.clone(), "router.b_hidden".into(), Category::Router, h);
                    for head in &GateHead::ALL[..2 + n] {
                        push(s, comp.clone(), format!("router.{head}.w"), Category::Router, h * m);
                        push(s, comp.clone(), format!("router.{head}.b"), Category::Router, m);
                    }
                }
                if acfg.sa_active() {
                    push(s, comp.clone(), "sa.w".into(), Category::Sa, latent * n);
                    push(s, comp.clone(), "sa.b".into(), Category::Sa, n);
                }
                site_id += 1;
            }
            center_id += 1;
        }
    }
    let mut assumptions = Vec::new();
    if arch.published_millions.is_some() {
        assumptions.extend(published_assumptions(arch, acfg));
        if any_full_width {
            assumptions.push(
                "the latent width equals or exceeds the channel width in some stage; the count still uses it unchanged"
                    .to_string(),
            );
        }
    }
    Ok(ParamAudit::new(&arch.name, items, arch.published_millions, assumptions))
}

fn published_assumptions(arch: &ArchSpec, acfg: &AdapterConfig) -> Vec<String> {
    let placement = match arch.style {
        BackboneStyle::SwinLike => "one adapter after every token mixer and every channel mixer (2 per block)",
        BackboneStyle::ConvnextLike => "one adapter after every complete block",
    };
    let scope = match acfg.group_size {
        None => "one shared center per stage".to_string(),
        Some(g) => format!("one shared center per {g} consecutive blocks"),
    };
    vec![
        placement.to_string(),
        format!("{scope}, capacity M = {} of the blocks it serves", acfg.capacity),
        format!(
            "latent width {} and router hidden width {} in every stage",
            acfg.latent, acfg.router_hidden
        ),
        format!(
            "router: global average pool, linear C->h with bias, then {} linear heads h->M with bias",
            acfg.n_heads()
        ),
        format!(
            "spatial aggregation: 1x1 projection latent->{} with bias at every site{}",
            acfg.kernel_sizes.len(),
            if acfg.sa_active() { "" } else { " (disabled here)" }
        ),
        "no adapters in patch-embedding or downsampling layers".to_string(),
        "no extra norms, scales or biases inside the adapter beyond those listed".to_string(),
        "decoder, detection heads and task heads are excluded".to_string(),
        "the published figure is not itemised, so the gap cannot be attributed to a specific component"
            .to_string(),
    ]
}

/// Ledger built by walking the instantiated tensors of `g`.
pub fn audit_model(g: &ModelGraph) -> ParamAudit {
    let stage_of_center = |i: usize| g.sites[g.centers[i].scope[0]].stage;
    let items = g
        .named_tensors()
        .into_iter()
        .map(|(name, category, t)| {
            let (comp, tensor) = name.split_once('.').unwrap_or((&name, ""));
            let stage = if let Some(i) = comp.strip_prefix("center") {
                i.parse().ok().map(stage_of_center)
            } else if let Some(i) = comp.strip_prefix("site") {
                i.parse::<usize>().ok().map(|i| g.sites[i].stage)
            } else {
                None
            };
            let component = match stage {
                Some(s) => format!("stage{s}.{comp}"),
                None => comp.to_string(),
            };
            AuditItem {
                component,
                tensor: tensor.to_string(),
                category,
                count: t.len(),
            }
        })
        .collect();
    ParamAudit::new("instantiated", items, None, Vec::new())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn swin_b() -> ParamAudit {
        audit_params(&ArchSpec::named("swin-b").unwrap(), &AdapterConfig::full_scale()).unwrap()
    }

    #[test]
    fn toy_matches_enumeration_item_by_item() {
        for style in [BackboneStyle::SwinLike, BackboneStyle::ConvnextLike] {
            for acfg in [
                AdapterConfig::default(),
                AdapterConfig {
                    group_size: Some(1),
                    kernel_sizes: vec![5],
                    ..AdapterConfig::default()
                },
                AdapterConfig {
                    static_routing: true,
                    use_sa: false,
                    ..AdapterConfig::default()
                },
            ] {
                let cfg = BackboneConfig {
                    style,
                    ..BackboneConfig::default()
                };
                let mut g = ModelGraph::build(&cfg, 0).unwrap();
                g.insert_adapters(&acfg, 0).unwrap();
                let closed = audit_params(&ArchSpec::from_backbone("toy", &cfg), &acfg).unwrap();
                let direct = audit_model(&g);
                let key = |i: &&AuditItem| (i.component.clone(), i.tensor.clone());
                let mut trainable: Vec<&AuditItem> =
                    direct.items.iter().filter(|i| i.category != Category::Backbone).collect();
                let mut expected: Vec<&AuditItem> = closed.items.iter().collect();
                trainable.sort_by_key(key);
                expected.sort_by_key(key);
                assert_eq!(expected, trainable);
                assert_eq!(closed.grand_total, direct.grand_total);
                assert_eq!(closed.grand_total, g.trainable_count());
            }
        }
    }

    #[test]
    fn swin_b_closed_form() {
        let a = swin_b();
        // Σ_s M_s·(2·C_s·Ĉ + Ĉ·(9+25+49)) with M = L, Ĉ = 128.
        let centers: usize = [(2, 128), (2, 256), (18, 512), (2, 1024)]
            .iter()
            .map(|&(m, c)| m * (2 * c * 128 + 128 * 83))
            .sum();
        assert_eq!(a.total(Category::Center), centers);
        // 2 sites per block, C·24 + 24 + 5·(24·M + M) per site.
        let routers: usize = [(2, 128), (2, 256), (18, 512), (2, 1024)]
            .iter()
            .map(|&(l, c)| 2 * l * (c * 24 + 24 + 5 * 25 * l))
            .sum();
        assert_eq!(a.total(Category::Router), routers);
        assert_eq!(a.total(Category::Sa), 48 * (128 * 3 + 3));
        assert_eq!(a.grand_total, centers + routers + 48 * 387);
        let m = a.grand_total as f64 / 1e6;
        assert!((3.8..=5.5).contains(&m), "{m}");
        assert!(a.render().contains("published: 5.2 M"));
        assert!(a.assumptions.len() >= 8);
    }

    #[test]
    fn doubling_latent_doubles_projection_pools() {
        let arch = ArchSpec::named("swin-b").unwrap();
        let sum_proj = |a: &ParamAudit| -> usize {
            a.items
                .iter()
                .filter(|i| i.tensor == "e_a" || i.tensor == "e_b")
                .map(|i| i.count)
                .sum()
        };
        let a = audit_params(&arch, &AdapterConfig::full_scale()).unwrap();
        let b = audit_params(
            &arch,
            &AdapterConfig {
                latent: 256,
                ..AdapterConfig::full_scale()
            },
        )
        .unwrap();
        assert_eq!(sum_proj(&b), 2 * sum_proj(&a));
    }

    #[test]
    fn unknown_architecture() {
        assert!(ArchSpec::named("resnet-50").is_err());
        for n in ArchSpec::NAMES {
            let a = audit_params(&ArchSpec::named(n).unwrap(), &AdapterConfig::full_scale()).unwrap();
            assert_eq!(a.grand_total, a.items.iter().map(|i| i.count).sum::<usize>());
        }
    }
}
