/**
 * Browser entry point: wires the socket client, the three.js viewport,
 * the control panel, and the session log replay drawer together.
 */
import * as THREE from "three";
import { OrbitControls } from "three/examples/jsm/controls/OrbitControls.js";
import { SessionClient } from "./client";
import { ControlPanel } from "./panel";
import { parseSessionLog, stateAt, ParseError } from "./replay";
import type { Timeline } from "./replay";
import { GuidanceScene, poseToMatrix } from "./scene";

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  parent: HTMLElement,
  className = "",
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (className) {
    node.className = className;
  }
  parent.appendChild(node);
  return node;
}

function setupViewport(container: HTMLElement): {
  scene: THREE.Scene;
  render: () => void;
} {
  const scene = new THREE.Scene();
  scene.background = new THREE.Color(0x1c2026);
  const camera = new THREE.PerspectiveCamera(50, 4 / 3, 0.01, 50);
  camera.position.set(1.2, -1.0, 0.9);
  camera.up.set(0, 0, 1);
  const renderer = new THREE.WebGLRenderer({ antialias: true });
  renderer.setSize(820, 560);
  container.appendChild(renderer.domElement);
  const controls = new OrbitControls(camera, renderer.domElement);
  controls.target.set(0.5, 0, 0);
  scene.add(new THREE.AmbientLight(0xffffff, 0.9));
  scene.add(new THREE.GridHelper(2, 20, 0x334455, 0x252d38).rotateX(Math.PI / 2));
  scene.add(new THREE.AxesHelper(0.2));
  return {
    scene,
    render: () => {
      controls.update();
      renderer.render(scene, camera);
    },
  };
}

function startLive(root: HTMLElement): void {
  const viewportBox = el("div", root, "viewport");
  const panelBox = el("div", root, "panel");
  const { scene, render } = setupViewport(viewportBox);
  const guidance = new GuidanceScene();
  scene.add(guidance.root);

  const client = new SessionClient((url) => new WebSocket(url));
  const panel = new ControlPanel(panelBox, {
    send: (kind, payload) => {
      try {
        client.send(kind, payload);
      } catch (err) {
        console.warn(`command dropped: ${(err as Error).message}`);
      }
    },
  });
  client.onChange((view) => {
    panel.update(view);
    guidance.update(view.push);
  });
  window.addEventListener("keydown", (event) => {
    if (panel.handleKey(event.key)) {
      event.preventDefault();
    }
  });

  const params = new URLSearchParams(window.location.search);
  const url = params.get("ws") ?? "ws://127.0.0.1:8765";
  client.connect(url);

  const loop = () => {
    client.tick();
    render();
    requestAnimationFrame(loop);
  };
  loop();
}

function startReplay(root: HTMLElement): void {
  const drawer = el("div", root, "replay");
  el("h3", drawer).textContent = "session log replay";
  const banner = el("div", drawer, "banner");
  const picker = el("input", drawer);
  picker.type = "file";
  const scrubber = el("input", drawer);
  scrubber.type = "range";
  scrubber.min = "0";
  scrubber.value = "0";
  scrubber.disabled = true;
  const summary = el("pre", drawer, "summary");

  let timeline: Timeline = { header: null, events: [] };

  const show = () => {
    const k = Number(scrubber.value);
    const state = stateAt(timeline, k);
    const lines = [
      `step ${state.step}/${timeline.events.length}`,
      `map: ${state.mapId ?? "-"}  locked: ${state.locked}`,
      `tool: ${state.toolId ?? "-"}  selected: ${state.selected ?? "-"}`,
      `trajectory points: ${state.trajectory.length}`,
    ];
    for (const [componentId, compState] of Object.entries(state.componentStates)) {
      lines.push(`  ${componentId}: ${compState}`);
    }
    if (state.lastFeedback !== null) {
      lines.push(`feedback ${state.lastFeedback.componentId}: ${state.lastFeedback.status}`);
    }
    if (state.lastSample !== null) {
      const placement = poseToMatrix(state.lastSample.camInTimber).multiply(
        poseToMatrix(state.lastSample.toolInCam),
      );
      const position = new THREE.Vector3().setFromMatrixPosition(placement);
      lines.push(
        `tool at [${position.x.toFixed(3)}, ${position.y.toFixed(3)}, ${position.z.toFixed(3)}] m`,
      );
    }
    summary.textContent = lines.join("\n");
  };

  picker.addEventListener("change", async () => {
    const file = picker.files?.[0];
    if (!file) {
      return;
    }
    banner.textContent = "";
    try {
      timeline = parseSessionLog(await file.text());
    } catch (err) {
      if (err instanceof ParseError) {
        banner.textContent = err.message;
        timeline = { header: null, events: [] };
      } else {
        throw err;
      }
    }
    scrubber.max = String(timeline.events.length);
    scrubber.value = String(timeline.events.length);
    scrubber.disabled = timeline.events.length === 0;
    show();
  });
  scrubber.addEventListener("input", show);
  show();
}

const app = document.getElementById("app");
if (app !== null) {
  startLive(app);
  startReplay(app);
}
