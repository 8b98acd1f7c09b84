/** Typed client for the generation service. The UI talks to exactly three
 * endpoints; anything else the page needs must come from these. */

export interface SamplerSpec {
  temperature: number;
  top_k: number;
  seed: number;
}

export interface GenerateRequest {
  captions: string[];
  source_id?: string;
  /** base64 PNG, already resized to the model's frame size */
  source_image?: string;
  sampler: SamplerSpec;
}

export interface Timings {
  queue_s: number;
  generate_s: number;
  total_s: number;
}

export interface GenerateResponse {
  /** one base64 PNG per target caption */
  frames: string[];
  model_id: string;
  sampler: SamplerSpec;
  timings: Timings;
}

export interface Health {
  status: string;
  model_id: string;
  config_digest: string;
}

export interface ModelCard {
  card: Record<string, unknown>;
  digest: string;
}

/** Carries the server's cause line; status 0 means the fetch itself failed. */
export class ApiError extends Error {
  constructor(readonly status: number, detail: string) {
    super(detail);
    this.name = "ApiError";
  }
}

async function causeLine(response: Response): Promise<string> {
  try {
    const body: unknown = await response.json();
    if (
      typeof body === "object" && body !== null &&
      typeof (body as { detail?: unknown }).detail === "string"
    ) {
      return (body as { detail: string }).detail;
    }
  } catch {
    // non-JSON error body; fall through to the status line
  }
  return `${response.status} ${response.statusText}`;
}

export class StoryApi {
  constructor(readonly baseUrl: string = "") {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    let response: Response;
    try {
      response = await fetch(this.baseUrl + path, init);
    } catch (err) {
      throw new ApiError(0, `service unreachable: ${(err as Error).message}`);
    }
    if (!response.ok) {
      throw new ApiError(response.status, await causeLine(response));
    }
    return response.json() as Promise<T>;
  }

  generate(request: GenerateRequest): Promise<GenerateResponse> {
    return this.request<GenerateResponse>("/api/generate", {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(request),
    });
  }

  health(): Promise<Health> {
    return this.request<Health>("/api/health");
  }

  modelCard(): Promise<ModelCard> {
    return this.request<ModelCard>("/api/model-card");
  }
}
