pub mod gradcheck;
pub mod oracle;
