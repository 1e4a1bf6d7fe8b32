import init, { structure_demo, balance_demo, metric_demo } from "./pkg/dsbert_wasm.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);

function matrix(title, rows, labels) {
  const head = rows[0].map((_, j) => `<th>${labels ? labels[j] : j}</th>`).join("");
  const body = rows
    .map((r, i) => {
      const cells = r.map((v) => `<td style="background:rgba(40,110,220,${Math.min(v, 1) * 0.6})">${v.toFixed(2)}</td>`).join("");
      return `<tr><th>${labels ? labels[i] : i}</th>${cells}</tr>`;
    })
    .join("");
  return `<table class="m"><caption>${title}</caption><tr><th></th>${head}</tr>${body}</table>`;
}

function esc(s) {
  return s.replace(/[&<>]/g, (c) => ({ "&": "&amp;", "<": "&lt;", ">": "&gt;" })[c]);
}

// Nodes on a circle, one arrow per transition at or above the threshold.
function drawGraph(svg, labels, trans, threshold) {
  const w = svg.width.baseVal.value, h = svg.height.baseVal.value;
  const r = Math.min(w, h) / 2 - 45, cx = w / 2, cy = h / 2;
  const pos = labels.map((_, i) => {
    const a = (2 * Math.PI * i) / labels.length - Math.PI / 2;
    return [cx + r * Math.cos(a), cy + r * Math.sin(a)];
  });
  let out = `<defs><marker id="arr" viewBox="0 0 10 10" refX="10" refY="5" markerWidth="6" markerHeight="6" orient="auto"><path d="M0,0L10,5L0,10z" fill="#555"/></marker></defs>`;
  trans.forEach((row, i) =>
    row.forEach((p, j) => {
      if (p < threshold || p === 0) return;
      const [x1, y1] = pos[i], [x2, y2] = pos[j];
      const sw = 0.5 + 3 * p;
      if (i === j) {
        out += `<circle cx="${x1}" cy="${y1 - 22}" r="10" fill="none" stroke="#555" stroke-width="${sw}"/>`;
        out += `<text x="${x1 + 12}" y="${y1 - 30}" font-size="10">${p.toFixed(2)}</text>`;
        return;
      }
      const dx = x2 - x1, dy = y2 - y1, len = Math.hypot(dx, dy);
      const ox = (-dy / len) * 6, oy = (dx / len) * 6;
      const sx = x1 + (dx / len) * 16 + ox, sy = y1 + (dy / len) * 16 + oy;
      const ex = x2 - (dx / len) * 16 + ox, ey = y2 - (dy / len) * 16 + oy;
      out += `<line x1="${sx}" y1="${sy}" x2="${ex}" y2="${ey}" stroke="#555" stroke-width="${sw}" marker-end="url(#arr)"/>`;
      out += `<text x="${(sx + ex) / 2 + ox}" y="${(sy + ey) / 2 + oy}" font-size="10">${p.toFixed(2)}</text>`;
    })
  );
  pos.forEach(([x, y], i) => {
    out += `<circle cx="${x}" cy="${y}" r="15" fill="#e8f0fc" stroke="#286edc"/>`;
    out += `<text x="${x}" y="${y + 28}" font-size="11" text-anchor="middle">${esc(labels[i])}</text>`;
    out += `<text x="${x}" y="${y + 4}" font-size="11" text-anchor="middle">${i}</text>`;
  });
  svg.innerHTML = out;
}

function guard(outId, f) {
  try {
    f();
  } catch (e) {
    $(outId).innerHTML = `<p class="err">${esc(String(e))}</p>`;
  }
}

function runStructure() {
  guard("s-out", () => {
    const thr = num("s-thr");
    const v = JSON.parse(structure_demo($("s-name").value, num("s-n"), num("s-seed"), thr));
    drawGraph($("s-graph"), v.states, v.estimated_trans, thr);
    const sample = v.sample.map(([s, sys, usr]) => `[${s}]\n  sys: ${sys}\n  usr: ${usr}`).join("\n");
    $("s-out").innerHTML =
      matrix("true transitions", v.true_trans) +
      matrix("estimated from sampled labels", v.estimated_trans) +
      `<p>first sampled dialogue:</p><pre>${esc(sample)}</pre><p>DOT export:</p><pre>${esc(v.dot)}</pre>`;
  });
}

function runBalance() {
  guard("b-out", () => {
    const v = JSON.parse(balance_demo(num("b-rows"), num("b-cols"), num("b-seed"), num("b-sharp"), num("b-skew")));
    const marks = v.p.map((row, i) => row.map((x, j) => (v.greedy_assignment[i] === j ? 1 : 0)));
    $("b-out").innerHTML =
      matrix("P (rows: utterance pairs)", v.p) +
      matrix("greedy target", marks) +
      `<table class="m"><caption>losses</caption>
        <tr><th>column sums</th><td>${v.column_sums.map((x) => x.toFixed(2)).join(" ")}</td></tr>
        <tr><th>||P||_b</th><td>${v.regularizer.toFixed(4)}</td></tr>
        <tr><th>balance + KL</th><td>${v.balance_kl.toFixed(4)}</td></tr>
        <tr><th>greedy balance</th><td>${v.greedy.toFixed(4)}</td></tr>
        <tr><th>top balance</th><td>${v.top.toFixed(4)}</td></tr>
        <tr><th>top row per state</th><td>${v.top_rows.join(" ")}</td></tr></table>`;
  });
}

function runMetric() {
  guard("m-out", () => {
    const v = JSON.parse(metric_demo($("m-name").value, $("m-method").value, num("m-k"), num("m-n"), num("m-seed")));
    $("m-out").innerHTML =
      `<p>SED <b>${v.sed.toFixed(4)}</b>, SCE <b>${v.sce.toFixed(4)}</b>${v.clamped ? " (clamped)" : ""}; ${v.n_pred} predicted vs ${v.n_true} true states</p>` +
      matrix("true transitions", v.true_trans) +
      matrix("predicted, projected to true states", v.projected) +
      `<pre>${esc(v.dot)}</pre>`;
  });
}

await init();
$("status").textContent = "Ready.";
$("s-thr").addEventListener("input", () => {
  $("s-thr-v").textContent = $("s-thr").value;
  runStructure();
});
$("b-skew").addEventListener("input", () => {
  $("b-skew-v").textContent = $("b-skew").value;
  runBalance();
});
$("s-run").addEventListener("click", runStructure);
$("b-run").addEventListener("click", runBalance);
$("m-run").addEventListener("click", runMetric);
runStructure();
runBalance();
