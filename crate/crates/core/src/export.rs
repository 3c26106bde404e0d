//! Tidy CSV exports for plotting.

use std::io::Write;

use crate::error::Result;
use crate::es::IterationLog;
use crate::pipeline::CertificateFile;
use crate::sim::Trace;

/// ES learning curve: `iteration,empirical_cost,mode`.
pub fn learning_curve<W: Write>(log: &[IterationLog], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["iteration", "empirical_cost", "mode"])?;
    for row in log {
        w.write_record([row.iteration.to_string(), row.empirical_cost.to_string(), row.mode.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Bound against dataset size, sorted by `N`.
pub fn bound_curve<W: Write>(certificates: &[CertificateFile], out: W) -> Result<()> {
    let mut rows: Vec<&CertificateFile> = certificates.iter().collect();
    rows.sort_by_key(|c| c.certificate.n);
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["N", "C_S", "kl", "R", "C_PAC", "C_QPAC", "selected_bound", "bound", "prior_bound"])?;
    for c in rows {
        let cert = &c.certificate;
        w.write_record([
            cert.n.to_string(),
            cert.c_s.to_string(),
            cert.kl.to_string(),
            cert.r.to_string(),
            cert.c_pac.to_string(),
            cert.c_qpac.to_string(),
            cert.selected_bound.to_string(),
            cert.selected_value.to_string(),
            c.prior_bound.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Trajectory overlay: one block of trace rows per labelled run.
pub fn trajectories<W: Write>(traces: &[(String, Trace)], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["run", "t", "x", "y", "heading", "primitive_id"])?;
    for (label, trace) in traces {
        for p in &trace.points {
            let id = if p.primitive_id == usize::MAX { String::new() } else { p.primitive_id.to_string() };
            w.write_record([
                label.clone(),
                p.t.to_string(),
                p.x.to_string(),
                p.y.to_string(),
                p.heading.to_string(),
                id,
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
