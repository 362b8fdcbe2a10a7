use std::fmt::Write as _;

use crate::loopsolve::{LoopSystem, NewtonConfig};

use super::{resolve_execution_order, Diagram, ScheduleItem, ScheduleOptions};

impl Diagram {
    /// Blocks and connections in diagram-file syntax.
    pub fn dump_structure(&self) -> String {
        let mut s = String::new();
        for e in self.entries() {
            let _ = write!(s, "block {} {}", e.name, e.block.kind());
            for (k, v) in e.block.params() {
                let _ = write!(s, " {k}={v}");
            }
            s.push('\n');
        }
        for e in self.edges() {
            let _ = writeln!(
                s,
                "connect {} {}",
                self.slot_label(e.source),
                self.slot_label(e.sink)
            );
        }
        s
    }

    /// Deterministic debug listing: the structure followed by comment lines
    /// for feedthrough flags, schedule, loop clusters and their residual
    /// systems. The result parses back as the same diagram.
    pub fn debug_dump(&self) -> String {
        let mut s = self.dump_structure();
        let name = |id| self.name(id).unwrap_or("?").to_string();

        s.push_str("# feedthrough:");
        for e in self.entries() {
            let kind = if e.traits.direct_feedthrough {
                "direct"
            } else {
                "indirect"
            };
            let _ = write!(s, " {}={kind}", e.name);
        }
        s.push('\n');

        let schedule = match resolve_execution_order(self, ScheduleOptions::default()) {
            Ok(sch) => sch,
            Err(err) => {
                let _ = writeln!(s, "# schedule: error: {err}");
                return s;
            }
        };
        s.push_str("# schedule:");
        for item in &schedule.items {
            match *item {
                ScheduleItem::Block(b) => {
                    let _ = write!(s, " {}", name(b));
                }
                ScheduleItem::Loop(k) => {
                    let members: Vec<String> = schedule.clusters[k]
                        .members
                        .iter()
                        .map(|&b| name(b))
                        .collect();
                    let _ = write!(s, " [{}]", members.join(" "));
                }
            }
        }
        s.push('\n');

        for (k, c) in schedule.clusters.iter().enumerate() {
            let ids: Vec<String> = c.members.iter().map(|b| b.0.to_string()).collect();
            let names: Vec<String> = c.members.iter().map(|&b| name(b)).collect();
            let _ = write!(
                s,
                "# loop {}: blocks {{{}}} ({})",
                k + 1,
                ids.join(","),
                names.join(" ")
            );
            let ext: Vec<String> = c
                .external_inputs
                .iter()
                .map(|(sink, src)| {
                    format!("{} -> {}", self.slot_label(*src), self.slot_label(*sink))
                })
                .collect();
            if !ext.is_empty() {
                let _ = write!(s, "; inputs {}", ext.join(", "));
            }
            s.push('\n');
            match LoopSystem::extract(c, self, NewtonConfig::default()) {
                Ok(ls) => {
                    for line in ls.system.dump().lines() {
                        let _ = writeln!(s, "#   {line}");
                    }
                }
                Err(err) => {
                    let _ = writeln!(s, "#   unsolvable: {err}");
                }
            }
        }
        s
    }
}
