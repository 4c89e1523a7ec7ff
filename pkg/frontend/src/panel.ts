/**
 * Control panel DOM: feedback bars, pose sliders, component list, and the
 * session buttons. All handlers send commands; nothing here mutates view
 * state directly, so the panel re-renders purely from the latest push.
 */
import { allGreen, barOffset, feedbackBars, formatReadout } from "./barmodel";
import type { CommandKind } from "./protocol";
import { bannerText } from "./viewstate";
import type { ViewState } from "./viewstate";

/** Arrow-key nudge step: half a millimetre, expressed in metres. */
export const NUDGE_STEP_M = 0.0005;

export interface PanelActions {
  send(kind: CommandKind, payload?: Record<string, unknown>): void;
}

const SLIDER_SPECS = [
  { id: "tx", label: "tx (m)", min: -0.75, max: 0.75, step: 0.001, value: 0 },
  { id: "ty", label: "ty (m)", min: -0.75, max: 0.75, step: 0.001, value: 0 },
  { id: "tz", label: "tz (m)", min: -0.75, max: 0.75, step: 0.001, value: 0 },
  { id: "rx", label: "rx (deg)", min: -180, max: 180, step: 1, value: 0 },
  { id: "ry", label: "ry (deg)", min: -180, max: 180, step: 1, value: 0 },
  { id: "rz", label: "rz (deg)", min: -180, max: 180, step: 1, value: 0 },
] as const;

function button(label: string, onClick: () => void): HTMLButtonElement {
  const el = document.createElement("button");
  el.textContent = label;
  el.addEventListener("click", onClick);
  return el;
}

export class ControlPanel {
  private banner: HTMLDivElement;
  private barsBox: HTMLDivElement;
  private statusLine: HTMLDivElement;
  private componentList: HTMLUListElement;
  private sliders = new Map<string, HTMLInputElement>();
  private toolSelect: HTMLSelectElement;

  constructor(
    root: HTMLElement,
    private readonly actions: PanelActions,
  ) {
    this.banner = document.createElement("div");
    this.banner.className = "banner";
    root.appendChild(this.banner);

    this.statusLine = document.createElement("div");
    this.statusLine.className = "status";
    root.appendChild(this.statusLine);

    const buttons = document.createElement("div");
    buttons.className = "buttons";
    buttons.append(
      button("load map", () => actions.send("LoadMap")),
      button("load model", () => actions.send("LoadModel")),
      button("cycle candidate", () => actions.send("CycleCandidate")),
      button("slide -5mm", () => actions.send("Slide", { offset: -0.005 })),
      button("slide +5mm", () => actions.send("Slide", { offset: 0.005 })),
      button("lock", () => actions.send("Lock")),
      button("refine", () => actions.send("Refine")),
      button("mark done", () => this.markDone()),
    );
    root.appendChild(buttons);

    this.toolSelect = document.createElement("select");
    for (const toolId of ["auger-16", "sickle-165", "chain-350"]) {
      const option = document.createElement("option");
      option.value = toolId;
      option.textContent = toolId;
      this.toolSelect.appendChild(option);
    }
    const mountRow = document.createElement("div");
    mountRow.append(
      this.toolSelect,
      button("mount", () =>
        actions.send("MountTool", { tool_id: this.toolSelect.value }),
      ),
    );
    root.appendChild(mountRow);

    const sliderBox = document.createElement("div");
    sliderBox.className = "sliders";
    for (const spec of SLIDER_SPECS) {
      const row = document.createElement("label");
      row.textContent = spec.label;
      const input = document.createElement("input");
      input.type = "range";
      input.min = String(spec.min);
      input.max = String(spec.max);
      input.step = String(spec.step);
      input.value = String(spec.value);
      input.addEventListener("change", () => this.sendPose());
      row.appendChild(input);
      sliderBox.appendChild(row);
      this.sliders.set(spec.id, input);
    }
    root.appendChild(sliderBox);

    this.componentList = document.createElement("ul");
    this.componentList.className = "components";
    root.appendChild(this.componentList);

    this.barsBox = document.createElement("div");
    this.barsBox.className = "bars";
    root.appendChild(this.barsBox);
  }

  /** Six sliders are one pose: any change re-sends all six values. */
  private sendPose(): void {
    const value = (id: string): number =>
      Number(this.sliders.get(id)?.value ?? 0);
    this.actions.send("SetInitialPose", {
      params: [
        value("tx"), value("ty"), value("tz"),
        value("rx"), value("ry"), value("rz"),
      ],
    });
  }

  private markDone(): void {
    const selected = this.statusLine.dataset.selected;
    if (selected) {
      this.actions.send("MarkDone", { component_id: selected });
    }
  }

  /**
   * Keyboard nudging: arrows move in the model x/y plane, page keys along
   * z, each by half a millimetre.
   */
  handleKey(key: string): boolean {
    const steps: Record<string, [number, number, number]> = {
      ArrowLeft: [-NUDGE_STEP_M, 0, 0],
      ArrowRight: [NUDGE_STEP_M, 0, 0],
      ArrowUp: [0, NUDGE_STEP_M, 0],
      ArrowDown: [0, -NUDGE_STEP_M, 0],
      PageUp: [0, 0, NUDGE_STEP_M],
      PageDown: [0, 0, -NUDGE_STEP_M],
    };
    const dt = steps[key];
    if (dt === undefined) {
      return false;
    }
    this.actions.send("NudgeTool", { dt });
    return true;
  }

  update(view: ViewState): void {
    const banner = bannerText(view);
    this.banner.textContent = banner ?? "";
    this.banner.style.display = banner === null ? "none" : "block";

    const push = view.push;
    if (push === null) {
      this.statusLine.textContent = "waiting for first push";
      return;
    }
    this.statusLine.dataset.selected = push.selected ?? "";
    this.statusLine.textContent =
      `phase ${push.phase}` +
      ` | frame ${push.frame}` +
      ` | tool ${push.tool_id ?? "-"}` +
      (push.candidate_count !== null
        ? ` | candidate ${push.candidate_index}/${push.candidate_count}`
        : "") +
      (allGreen(push) ? " | ALL GREEN" : "");

    this.componentList.replaceChildren();
    for (const [componentId, state] of Object.entries(push.components)) {
      const item = document.createElement("li");
      item.textContent = `${componentId}: ${state}`;
      item.className = componentId === push.selected ? "selected" : "";
      item.addEventListener("click", () =>
        this.actions.send("SelectComponent", { component_id: componentId }),
      );
      this.componentList.appendChild(item);
    }

    this.barsBox.replaceChildren();
    for (const bar of feedbackBars(push)) {
      const row = document.createElement("div");
      row.className = bar.green ? "bar green" : "bar red";
      const track = document.createElement("div");
      track.className = "track";
      const marker = document.createElement("div");
      marker.className = "marker";
      marker.style.left = `${50 + 50 * barOffset(bar)}%`;
      track.appendChild(marker);
      const text = document.createElement("span");
      const arrow = bar.arrow > 0 ? "→" : bar.arrow < 0 ? "←" : "·";
      text.textContent = `${bar.label} ${arrow} ${formatReadout(bar)}`;
      row.append(track, text);
      this.barsBox.appendChild(row);
    }
  }
}
