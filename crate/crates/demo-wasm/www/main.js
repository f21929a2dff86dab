import init, { compare_distributions, evaluate_breaker, check_compliance } from "./pkg/ontopipe_demo_wasm.js";

const $ = (id) => document.getElementById(id);

function show(target, raw, render) {
  const out = $(target);
  const value = JSON.parse(raw);
  out.classList.toggle("error", "error" in value);
  out.textContent = "error" in value ? value.error : render(value);
}

function renderDivergence(v) {
  const fmt = (xs) => xs.map((x) => x.toFixed(3)).join(", ");
  return `divergence ${v.divergence.toFixed(4)}\nbaseline  [${fmt(v.baseline)}]\ncurrent   [${fmt(v.current)}]`;
}

function renderBreaker(v) {
  return `${v.state}\n${v.reason}`;
}

function renderCompliance(v) {
  const verdict = v.verdict.verdict;
  const lines = [verdict];
  if (verdict === "PermitWithConditions") v.verdict.conditions.forEach((c) => lines.push(`  condition: ${c}`));
  if (verdict === "Deny") lines.push(`  reason: ${v.verdict.reason}`);
  lines.push("", "audit:");
  v.audit.forEach((e) => lines.push(`  ${e.adapter_id} [${e.provision}] ${e.verdict.verdict}`, `    ${e.reasoning}`));
  v.notes.forEach((n) => lines.push(`note: ${n}`));
  return lines.join("\n");
}

await init();

$("jsd-run").onclick = () =>
  show("jsd-out", compare_distributions($("jsd-base").value, $("jsd-cur").value), renderDivergence);
$("brk-run").onclick = () =>
  show("brk-out", evaluate_breaker($("brk-ratios").value, Number($("brk-threshold").value)), renderBreaker);
$("cmp-run").onclick = () =>
  show("cmp-out", check_compliance($("cmp-op").value, $("cmp-ctx").value), renderCompliance);
